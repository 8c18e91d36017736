//! Greedy speculative decoding over hybrid caches.
//!
//! The verifier keeps one [`DecodeState`] whose position `c` trails the
//! verified prefix `y_1..y_j` by at least one token (the last emitted token
//! has not been fed yet). A round feeds `y_{c+1..j}` followed by the `K`
//! drafts in one chunk, snapshotting recurrent layers at `j`. On a partial
//! accept the state returns to that snapshot; on a full accept it stays at
//! `k = j + K`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::decode::{DecodeState, InferenceModel};
use crate::error::{Error, Result};
use crate::model::HybridModelSpec;
use crate::scalar::Scalar;
use crate::tensor::argmax;

/// Length of the agreeing prefix of two equal-length token runs.
pub fn first_conflict(draft: &[usize], verified: &[usize]) -> Result<usize> {
    if draft.len() != verified.len() {
        return Err(Error::LengthMismatch {
            what: "first_conflict inputs",
            left: draft.len(),
            right: verified.len(),
        });
    }
    Ok(draft.iter().zip(verified).position(|(a, b)| a != b).unwrap_or(draft.len()))
}

/// Verifier state between rounds.
#[derive(Clone, Debug)]
pub struct SpeculationCache<T> {
    pub state: DecodeState<T>,
}

impl<T: Scalar> SpeculationCache<T> {
    pub fn new(verifier: &InferenceModel<T>) -> Self {
        Self {
            state: verifier.new_state(),
        }
    }

    pub fn position(&self) -> usize {
        self.state.position
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Verified {
    /// Accepted drafts followed by the bonus token.
    pub emitted: Vec<usize>,
    pub accepted: usize,
    /// Length of the verified prefix the cache now covers.
    pub cache_position: usize,
}

/// Checks `drafts` as the continuation of the verified prefix `seq`.
pub fn verify<T: Scalar>(model: &InferenceModel<T>, seq: &[usize], drafts: &[usize], cache: &mut SpeculationCache<T>) -> Result<Verified> {
    let j = seq.len();
    let c = cache.state.position;
    if c >= j || !cache.state.is_consistent() {
        return Err(Error::CacheLength {
            expected: j.saturating_sub(1),
            actual: c,
        });
    }
    let k = j + drafts.len();
    let mut feed = seq[c..].to_vec();
    feed.extend_from_slice(drafts);
    let recurrent = model.has_recurrent_layers();
    let (rows, snap) = model.forward_chunk(&feed, &mut cache.state, recurrent.then_some(j))?;
    let greedy: Vec<usize> = rows[j - c - 1..].iter().map(|r| argmax(r)).collect();
    let a = first_conflict(drafts, &greedy[..drafts.len()])?;
    let mut emitted = drafts[..a].to_vec();
    emitted.push(greedy[a]);
    if a < drafts.len() {
        match snap {
            Some(s) => cache.state.restore(s),
            None => cache.state.truncate_attention(j + a)?,
        }
    }
    debug_assert!(cache.state.position == k || a < drafts.len());
    Ok(Verified {
        emitted,
        accepted: a,
        cache_position: cache.state.position,
    })
}

/// Source of draft tokens given the verified prefix.
pub trait Drafter {
    fn propose(&mut self, seq: &[usize], k: usize) -> Result<Vec<usize>>;

    /// Tokens fed to the drafter more than once so far.
    fn recomputed(&self) -> usize {
        0
    }
}

/// Greedy drafting with a (usually smaller) model.
pub struct ModelDrafter<T> {
    model: InferenceModel<T>,
    state: DecodeState<T>,
    fed: Vec<usize>,
    recomputed: usize,
}

impl<T: Scalar> ModelDrafter<T> {
    pub fn new(model: InferenceModel<T>) -> Self {
        let state = model.new_state();
        Self {
            model,
            state,
            fed: Vec::new(),
            recomputed: 0,
        }
    }

    pub fn model(&self) -> &InferenceModel<T> {
        &self.model
    }

    /// Tokens covered by the draft's cache.
    pub fn cached_tokens(&self) -> &[usize] {
        &self.fed
    }
}

impl<T: Scalar> Drafter for ModelDrafter<T> {
    fn propose(&mut self, seq: &[usize], k: usize) -> Result<Vec<usize>> {
        if k == 0 || seq.is_empty() {
            return Ok(Vec::new());
        }
        let recurrent = self.model.has_recurrent_layers();
        let lcp = self.fed.iter().zip(seq).take_while(|(a, b)| a == b).count();
        let keep = lcp.min(seq.len() - 1);
        if recurrent {
            // the state sits at the previous prefix end; drafts past it were rolled back
            let base = self.state.position;
            if keep < base {
                self.state = self.model.new_state();
                self.fed.clear();
                return self.propose(seq, k);
            }
            self.recomputed += keep - base;
            self.fed.truncate(base);
        } else {
            self.recomputed += lcp - keep;
            self.state.truncate_attention(keep)?;
            self.fed.truncate(keep);
        }
        let start = self.fed.len();
        let (rows, _) = self.model.forward_chunk(&seq[start..], &mut self.state, None)?;
        self.fed.extend_from_slice(&seq[start..]);
        let snap = recurrent.then(|| self.state.snapshot());
        let mut logits = rows.into_iter().last().expect("non-empty feed");
        let mut drafts = Vec::with_capacity(k);
        loop {
            let t = argmax(&logits);
            drafts.push(t);
            if drafts.len() == k {
                break;
            }
            logits = self.model.step(t, &mut self.state)?;
            self.fed.push(t);
        }
        if let Some(s) = snap {
            self.state.restore(s);
        }
        Ok(drafts)
    }

    fn recomputed(&self) -> usize {
        self.recomputed
    }
}

/// Proposes `k` tokens whose first always differs from the verifier's choice.
pub struct AdversarialDrafter<'a, T> {
    pub verifier: &'a InferenceModel<T>,
}

impl<T: Scalar> Drafter for AdversarialDrafter<'_, T> {
    fn propose(&mut self, seq: &[usize], k: usize) -> Result<Vec<usize>> {
        if k == 0 {
            return Ok(Vec::new());
        }
        let mut st = self.verifier.new_state();
        let (rows, _) = self.verifier.forward_chunk(seq, &mut st, None)?;
        let v = self.verifier.spec.vocab;
        let wrong = (argmax(rows.last().expect("non-empty prefix")) + 1) % v;
        Ok(vec![wrong; k])
    }
}

/// Per-session counters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpecStats {
    pub k: usize,
    pub verifier_calls: usize,
    /// Tokens produced by verify calls, counted before the output cap.
    pub generated: usize,
    /// `histogram[n]` = calls that produced `n` tokens.
    pub histogram: Vec<usize>,
    pub draft_recomputed: usize,
    pub wall_secs: f64,
}

impl SpecStats {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            histogram: vec![0; k + 2],
            ..Default::default()
        }
    }

    pub fn record(&mut self, produced: usize) {
        self.verifier_calls += 1;
        self.generated += produced;
        if produced >= self.histogram.len() {
            self.histogram.resize(produced + 1, 0);
        }
        self.histogram[produced] += 1;
    }

    pub fn mean_generated(&self) -> f64 {
        if self.verifier_calls == 0 {
            0.0
        } else {
            self.generated as f64 / self.verifier_calls as f64
        }
    }

    pub fn tokens_per_sec(&self) -> f64 {
        if self.wall_secs > 0.0 {
            self.generated as f64 / self.wall_secs
        } else {
            0.0
        }
    }

    /// Histogram totals agree with the counters and every call produced
    /// between 1 and `k + 1` tokens.
    pub fn check(&self) -> Result<()> {
        let calls: usize = self.histogram.iter().sum();
        let total: usize = self.histogram.iter().enumerate().map(|(n, c)| n * c).sum();
        let out_of_range = self.histogram.iter().enumerate().any(|(n, &c)| c > 0 && (n == 0 || n > self.k + 1));
        if calls != self.verifier_calls || total != self.generated || out_of_range {
            return Err(Error::Config(format!("inconsistent speculation stats {self:?}")));
        }
        Ok(())
    }
}

/// Speculative continuation of `prompt` (non-empty) by at most `max_tokens`
/// tokens, stopping after `eos`.
pub fn speculate<T: Scalar>(
    verifier: &InferenceModel<T>,
    drafter: &mut dyn Drafter,
    prompt: &[usize],
    k: usize,
    max_tokens: usize,
    eos: Option<usize>,
) -> Result<(Vec<usize>, SpecStats)> {
    if k == 0 {
        return Err(Error::Config("speculation needs K >= 1".into()));
    }
    if prompt.is_empty() {
        return Err(Error::LengthMismatch {
            what: "prompt length",
            left: 0,
            right: 1,
        });
    }
    let start = Instant::now();
    let mut stats = SpecStats::new(k);
    let mut cache = SpeculationCache::new(verifier);
    let mut seq = prompt.to_vec();
    let mut out = Vec::with_capacity(max_tokens);
    let before = drafter.recomputed();
    'outer: while out.len() < max_tokens {
        let drafts = drafter.propose(&seq, k)?;
        let v = verify(verifier, &seq, &drafts, &mut cache)?;
        stats.record(v.emitted.len());
        for t in v.emitted {
            out.push(t);
            seq.push(t);
            if Some(t) == eos || out.len() == max_tokens {
                break 'outer;
            }
        }
    }
    stats.draft_recomputed = drafter.recomputed() - before;
    stats.wall_secs = start.elapsed().as_secs_f64();
    Ok((out, stats))
}

/// One benchmark row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub struct BenchRecord {
    #[serde(rename = "K")]
    pub k: usize,
    pub draft_config: HybridModelSpec,
    pub verifier_config: HybridModelSpec,
    pub mean_gen_tokens: f64,
    pub tokens_per_sec: f64,
    pub speedup_vs_sequential: f64,
    /// Every prompt reproduced greedy decoding.
    pub exact: bool,
    pub prompts: usize,
    pub stats: SpecStats,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

/// Runs speculation and plain greedy decoding over `prompts` `runs` times;
/// rates are medians over runs.
pub fn spec_bench<T: Scalar>(
    verifier: &InferenceModel<T>,
    draft: &InferenceModel<T>,
    prompts: &[Vec<usize>],
    k: usize,
    max_tokens: usize,
    eos: Option<usize>,
    runs: usize,
) -> Result<BenchRecord> {
    let (mut spec_rates, mut seq_rates) = (Vec::new(), Vec::new());
    let mut total = SpecStats::new(k);
    let mut exact = true;
    for run in 0..runs.max(1) {
        let mut produced = 0usize;
        let mut secs = 0.0;
        let mut seq_secs = 0.0;
        let mut seq_produced = 0usize;
        for p in prompts {
            let mut drafter = ModelDrafter::new(draft.clone());
            let (out, st) = speculate(verifier, &mut drafter, p, k, max_tokens, eos)?;
            produced += out.len();
            secs += st.wall_secs;
            let t0 = Instant::now();
            let reference = crate::decode::greedy_decode(verifier, p, max_tokens, eos)?;
            seq_secs += t0.elapsed().as_secs_f64();
            seq_produced += reference.len();
            if run == 0 {
                exact &= out == reference;
                total.verifier_calls += st.verifier_calls;
                total.generated += st.generated;
                total.draft_recomputed += st.draft_recomputed;
                for (n, c) in st.histogram.iter().enumerate() {
                    if n >= total.histogram.len() {
                        total.histogram.resize(n + 1, 0);
                    }
                    total.histogram[n] += c;
                }
            }
        }
        spec_rates.push(produced as f64 / secs.max(1e-12));
        seq_rates.push(seq_produced as f64 / seq_secs.max(1e-12));
    }
    total.check()?;
    let tps = median(spec_rates);
    let seq_tps = median(seq_rates);
    total.wall_secs = total.generated as f64 / tps.max(1e-12);
    Ok(BenchRecord {
        k,
        draft_config: draft.spec.clone(),
        verifier_config: verifier.spec.clone(),
        mean_gen_tokens: total.mean_generated(),
        tokens_per_sec: tps,
        speedup_vs_sequential: tps / seq_tps.max(1e-12),
        exact,
        prompts: prompts.len(),
        stats: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::greedy_decode;
    use crate::model::{HybridLM, LayerKind};
    use crate::ssm::{reset_snapshot_count, snapshot_count};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn inf(kinds: Vec<LayerKind>, seed: u64) -> InferenceModel<f64> {
        let mut s = HybridModelSpec::teacher(7, 8, kinds.len(), 2, 1, 12);
        s.layer_kinds = kinds;
        s.state_dim = 3;
        let m = HybridLM::init(s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        InferenceModel::from_model(&m).unwrap()
    }

    #[test]
    fn first_conflict_cases() {
        assert_eq!(first_conflict(&[5, 7, 2], &[5, 7, 2]).unwrap(), 3);
        assert_eq!(first_conflict(&[5, 7, 2], &[5, 9, 2]).unwrap(), 1);
        assert_eq!(first_conflict(&[], &[]).unwrap(), 0);
        assert!(first_conflict(&[1], &[]).is_err());
    }

    #[test]
    fn full_and_zero_acceptance_rounds() {
        use LayerKind::{Attention, Ssm};
        let v = inf(vec![Attention, Ssm], 1);
        let seq = vec![1, 2, 3];
        let greedy = greedy_decode(&v, &seq, 4, None).unwrap();
        let mut cache = SpeculationCache::new(&v);
        let r = verify(&v, &seq, &greedy[..3], &mut cache).unwrap();
        assert_eq!(r.emitted, greedy);
        assert_eq!(r.cache_position, 6);

        let mut cache = SpeculationCache::new(&v);
        let wrong = vec![(greedy[0] + 1) % 7, greedy[1], greedy[2]];
        let r = verify(&v, &seq, &wrong, &mut cache).unwrap();
        assert_eq!(r.emitted, vec![greedy[0]]);
        assert_eq!(r.cache_position, 3);
        assert!(cache.state.is_consistent());
    }

    #[test]
    fn stale_cache_is_rejected() {
        let v = inf(vec![LayerKind::Ssm], 2);
        let mut cache = SpeculationCache::new(&v);
        v.forward_chunk(&[1, 2, 3], &mut cache.state, None).unwrap();
        assert!(matches!(verify(&v, &[1, 2, 3], &[4], &mut cache), Err(Error::CacheLength { .. })));
    }

    #[test]
    fn identical_draft_accepts_everything() {
        use LayerKind::{Attention, Ssm};
        for kinds in [vec![Attention, Attention], vec![Ssm, Attention], vec![Ssm, Ssm]] {
            let v = inf(kinds.clone(), 3);
            for k in 1..=4 {
                let mut d = ModelDrafter::new(inf(kinds.clone(), 3));
                let (out, st) = speculate(&v, &mut d, &[1, 4], k, 20, None).unwrap();
                assert_eq!(out, greedy_decode(&v, &[1, 4], 20, None).unwrap());
                assert_eq!(st.mean_generated(), (k + 1) as f64);
                st.check().unwrap();
            }
        }
    }

    #[test]
    fn adversarial_draft_yields_one_per_call() {
        let v = inf(vec![LayerKind::Attention, LayerKind::Ssm], 4);
        let mut d = AdversarialDrafter { verifier: &v };
        let (out, st) = speculate(&v, &mut d, &[2], 1, 12, None).unwrap();
        assert_eq!(out, greedy_decode(&v, &[2], 12, None).unwrap());
        assert_eq!(st.mean_generated(), 1.0);
    }

    #[test]
    fn mismatched_models_stay_exact() {
        use LayerKind::{Attention, Ssm};
        let v = inf(vec![Attention, Ssm, Attention], 5);
        for (kinds, seed) in [(vec![Attention], 6), (vec![Ssm], 7), (vec![Ssm, Attention], 8)] {
            for k in 1..=5 {
                let mut d = ModelDrafter::new(inf(kinds.clone(), seed));
                let (out, st) = speculate(&v, &mut d, &[3, 1, 4], k, 25, None).unwrap();
                assert_eq!(out, greedy_decode(&v, &[3, 1, 4], 25, None).unwrap());
                st.check().unwrap();
            }
        }
    }

    #[test]
    fn recurrent_draft_matches_scratch_greedy() {
        let d_model = inf(vec![LayerKind::Ssm, LayerKind::Attention], 9);
        let mut d = ModelDrafter::new(inf(vec![LayerKind::Ssm, LayerKind::Attention], 9));
        let seq = vec![1, 2, 3];
        let first = d.propose(&seq, 3).unwrap();
        assert_eq!(first, greedy_decode(&d_model, &seq, 3, None).unwrap());
        let mut next = seq.clone();
        next.extend([first[0], (first[1] + 1) % 7]);
        let second = d.propose(&next, 3).unwrap();
        assert_eq!(second, greedy_decode(&d_model, &next, 3, None).unwrap());
        assert_eq!(d.recomputed(), 1);
        assert!(d.propose(&next, 0).unwrap().is_empty());
    }

    #[test]
    fn verify_retains_at_most_one_snapshot_per_round() {
        let v = inf(vec![LayerKind::Ssm, LayerKind::Ssm], 10);
        let mut cache = SpeculationCache::new(&v);
        reset_snapshot_count();
        verify(&v, &[1, 2], &[3, 4, 5], &mut cache).unwrap();
        assert!(snapshot_count() <= 2 * 2);
    }

    #[test]
    fn output_is_prefix_stable() {
        let v = inf(vec![LayerKind::Ssm, LayerKind::Attention], 11);
        let run = |n| {
            let mut d = ModelDrafter::new(inf(vec![LayerKind::Attention], 12));
            speculate(&v, &mut d, &[5, 5], 3, n, None).unwrap().0
        };
        let long = run(17);
        for n in [1, 4, 9] {
            assert_eq!(run(n), long[..n]);
        }
    }
}
