use hybrid_core::autodiff::Graph;
use hybrid_core::conversion::{build_hybrid, InitMode};
use hybrid_core::corpus::{decode, encode};
use hybrid_core::decode::{greedy_decode, InferenceModel};
use hybrid_core::distill::{dpo_pair_loss, PreferencePair};
use hybrid_core::eval::kl_from_log_probs;
use hybrid_core::speculative::{speculate, ModelDrafter};
use hybrid_core::ssm::{multistep, SsmHeadParams, SsmHeadState};
use hybrid_core::tensor::{log_softmax, softmax_in_place, Tensor};
use hybrid_core::{HybridLM, HybridModelSpec, LayerKind};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(seed: u64, kinds: Vec<LayerKind>, state_dim: usize) -> HybridLM<f64> {
    let mut s = HybridModelSpec::teacher(13, 8, kinds.len(), 2, 1, 12);
    s.layer_kinds = kinds;
    s.state_dim = state_dim;
    HybridLM::init(s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn kinds_from(mask: u8, layers: usize) -> Vec<LayerKind> {
    (0..layers)
        .map(|l| if mask >> l & 1 == 1 { LayerKind::Ssm } else { LayerKind::Attention })
        .collect()
}

fn head(seed: u64, n: usize, ns: usize, lc: usize) -> SsmHeadParams<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = |len: usize, lo: f64, hi: f64| -> Vec<f64> { (0..len).map(|_| rng.gen_range(lo..hi)).collect() };
    SsmHeadParams {
        channels: n,
        state: ns,
        conv_len: lc,
        a: v(n * ns, -2.0, -0.1),
        dt_w: v(n * ns, -0.5, 0.5),
        dt_b: v(ns, -2.0, 0.0),
        conv_w: v(n * lc, -0.8, 0.8),
        conv_b: v(n, -0.2, 0.2),
        resample_b: (ns != n).then(|| v(n * ns, -0.5, 0.5)),
        resample_c: (ns != n).then(|| v(n * ns, -0.5, 0.5)),
        linear_reduction: false,
    }
}

fn rows(seed: u64, len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(row in prop::collection::vec(-50.0f64..50.0, 1..40), shift in -100.0f64..100.0) {
        let mut p = row.clone();
        softmax_in_place(&mut p);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut q: Vec<f64> = row.iter().map(|x| x + shift).collect();
        softmax_in_place(&mut q);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_self(a in prop::collection::vec(-5.0f64..5.0, 2..20), seed in any::<u64>()) {
        let b = rows(seed, a.len()).iter().map(|x| 5.0 * x).collect::<Vec<_>>();
        let (mut la, mut lb) = (vec![0.0; a.len()], vec![0.0; a.len()]);
        log_softmax(&a, &mut la);
        log_softmax(&b, &mut lb);
        prop_assert!(kl_from_log_probs(&la, &lb) >= -1e-12);
        prop_assert!(kl_from_log_probs(&la, &la).abs() < 1e-12);
    }

    #[test]
    fn bytes_round_trip(s in ".{0,64}") {
        let t = encode(&s);
        prop_assert!(t.iter().all(|&x| x < 256));
        prop_assert_eq!(decode(&t), s);
    }

    #[test]
    fn stepping_matches_batch_scan(seed in any::<u64>(), n in 1usize..5, ns in 1usize..6, lc in 1usize..5, t in 1usize..20) {
        let p = head(seed, n, ns, lc);
        let (x, b, c) = (rows(seed ^ 1, t * n), rows(seed ^ 2, t * n), rows(seed ^ 3, t * n));
        let batch = p.forward_batch(&x, &b, &c);
        let mut st = SsmHeadState::new(&p);
        let stepped: Vec<f64> = (0..t).flat_map(|r| {
            let rr = r * n..(r + 1) * n;
            p.step(&x[rr.clone()], &b[rr.clone()], &c[rr], &mut st)
        }).collect();
        let scale = batch.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
        for (u, v) in stepped.iter().zip(&batch) {
            prop_assert!((u - v).abs() / scale < 1e-9);
        }
    }

    #[test]
    fn multistep_composes(seed in any::<u64>(), cuts in prop::collection::vec(0usize..=24, 4)) {
        let mut cuts = cuts;
        cuts.sort_unstable();
        let [i, j, m, k] = [cuts[0], cuts[1], cuts[2], cuts[3]];
        let (n, p) = (3, head(seed, 3, 4, 3));
        let (x, b, c) = (rows(seed ^ 4, 24 * n), rows(seed ^ 5, 24 * n), rows(seed ^ 6, 24 * n));
        let mut st = SsmHeadState::new(&p);
        for r in 0..i {
            let rr = r * n..(r + 1) * n;
            p.step(&x[rr.clone()], &b[rr.clone()], &c[rr], &mut st);
        }
        let whole = multistep(&p, st.clone(), &x[i * n..k * n], &b[i * n..k * n], &c[i * n..k * n], i, j, k).unwrap();
        let first = multistep(&p, st, &x[i * n..m * n], &b[i * n..m * n], &c[i * n..m * n], i, j.min(m), m).unwrap();
        let second = multistep(&p, first.state_k.clone(), &x[m * n..k * n], &b[m * n..k * n], &c[m * n..k * n], m, m, k).unwrap();
        prop_assert_eq!(&whole.state_k, &second.state_k);
        prop_assert_eq!(&whole.state_j, &first.state_j);
        prop_assert_eq!(whole.state_j.position, j);
        prop_assert_eq!(whole.state_k.position, k);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn chunked_feed_matches_stepping(seed in 0u64..1000, mask in 0u8..8, split in 0usize..9) {
        let m = InferenceModel::from_model(&model(seed, kinds_from(mask, 3), 6).cast::<f32>()).unwrap();
        let toks: Vec<usize> = rows(seed, 8).iter().map(|x| ((x + 1.0) * 6.0) as usize).collect();
        let mut a = m.new_state();
        let (mut got, _) = m.forward_chunk(&toks[..split.min(8)], &mut a, None).unwrap();
        got.extend(m.forward_chunk(&toks[split.min(8)..], &mut a, Some(8)).unwrap().0);
        let mut b = m.new_state();
        let want: Vec<Vec<f32>> = toks.iter().map(|&t| m.step(t, &mut b).unwrap()).collect();
        prop_assert_eq!(got.len(), want.len());
        for (u, v) in got.iter().zip(&want) {
            prop_assert!(u.iter().zip(v).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn speculation_reproduces_greedy(seed in 0u64..1000, mask in 0u8..4, k in 1usize..7, plen in 1usize..6, noisy in any::<bool>()) {
        let v = model(seed, kinds_from(mask, 2), 4).cast::<f32>();
        let d = if noisy {
            model(seed + 1, kinds_from(mask ^ 1, 2), 4).cast::<f32>()
        } else {
            build_hybrid(&model(seed, vec![LayerKind::Attention; 2], 4).cast::<f32>(), &[LayerKind::Ssm, LayerKind::Attention], InitMode::Attention, seed).unwrap()
        };
        let vi = InferenceModel::from_model(&v).unwrap();
        let prompt: Vec<usize> = (0..plen).map(|i| (seed as usize + 3 * i) % 13).collect();
        let (out, stats) = speculate(&vi, &mut ModelDrafter::new(InferenceModel::from_model(&d).unwrap()), &prompt, k, 16, None).unwrap();
        prop_assert_eq!(out, greedy_decode(&vi, &prompt, 16, None).unwrap());
        prop_assert!(stats.check().is_ok());
        prop_assert!(stats.mean_generated() >= 1.0 && stats.mean_generated() <= (k + 1) as f64);
    }

    #[test]
    fn prompt_rows_do_not_affect_kd_loss(seed in any::<u64>(), prompt_len in 1usize..4, cont_len in 1usize..4) {
        let v = 5;
        let t = prompt_len + cont_len - 1;
        let logits = rows(seed, t * v);
        let mut probs = rows(seed ^ 9, cont_len * v);
        for r in probs.chunks_exact_mut(v) {
            softmax_in_place(r);
        }
        let targets: Vec<usize> = (0..cont_len).map(|i| (seed as usize + i) % v).collect();
        let off = prompt_len - 1;
        let eval = |l: Vec<f64>| {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::new(vec![t, v], l).unwrap().with_grad(true));
            let loss = g.kd_loss(x, off, &targets, &probs, 1.0, 0.1).unwrap();
            g.backward(loss).unwrap();
            (g.value(loss).item(), g.grad(x).unwrap().to_vec())
        };
        let (base, grad) = eval(logits.clone());
        prop_assert!(grad[..off * v].iter().all(|&x| x == 0.0));
        let mut masked = logits;
        for x in &mut masked[..off * v] {
            *x += 3.0;
        }
        prop_assert_eq!(eval(masked).0, base);
    }

    #[test]
    fn dpo_reference_receives_no_gradient(seed in 0u64..1000, mask in 0u8..4, clen in 1usize..4, rlen in 1usize..4) {
        let s = model(seed, kinds_from(mask, 2), 4);
        let r = model(seed + 7, kinds_from(mask, 2), 4);
        let pair = PreferencePair {
            prompt: vec![1, 2],
            chosen: (0..clen).map(|i| (i + 3) % 13).collect(),
            rejected: (0..rlen).map(|i| (i + 7) % 13).collect(),
        };
        let mut g = Graph::new();
        let sv = s.bind(&mut g, true);
        let rv = r.bind(&mut g, true);
        let loss = dpo_pair_loss(&mut g, (&s, &sv), (&r, &rv), &pair, 0.1).unwrap();
        g.backward(loss).unwrap();
        prop_assert!(rv.values().all(|&v| g.grad(v).is_none_or(|gr| gr.iter().all(|&x| x == 0.0))));
        prop_assert!(sv.values().any(|&v| g.grad(v).is_some_and(|gr| gr.iter().any(|&x| x != 0.0))));
    }
}
