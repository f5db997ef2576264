use eivit::autodiff::{grad_check, random_projection, uniform, GradCheckOptions, Graph};
use eivit::cat::{AlphaMode, Cat, CatConfig, Concepts, ConceptMode};
use eivit::nn::{Bound, InitRng, ParamId, ParamStore};
use eivit::Tensor;
use rand::{Rng, SeedableRng};

const MODES: [(ConceptMode, AlphaMode); 4] = [
    (ConceptMode::InputIndependent, AlphaMode::Positional),
    (ConceptMode::InputIndependent, AlphaMode::FeatureDependent),
    (ConceptMode::InputDependent, AlphaMode::Positional),
    (ConceptMode::InputDependent, AlphaMode::FeatureDependent),
];

fn build(c: usize, h: usize, l: usize, modes: (ConceptMode, AlphaMode), seed: u64) -> (Cat, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = InitRng::seed_from_u64(seed);
    let cfg = CatConfig {
        num_concepts: Some(l),
        concept_mode: modes.0,
        alpha_mode: modes.1,
        ..Default::default()
    };
    let cat = Cat::new(&mut store, "cat", c, h, h, &cfg, &mut rng).unwrap();
    (cat, store)
}

fn jitter(store: &mut ParamStore<f64>, seed: u64, amp: f64) {
    let mut rng = InitRng::seed_from_u64(seed);
    for i in 0..store.len() {
        for v in store.get_mut(ParamId(i)).data_mut() {
            *v += rng.gen_range(-amp..amp);
        }
    }
}

#[test]
fn contracts_hold_over_twenty_seeds() {
    for seed in 0..20u64 {
        let modes = MODES[seed as usize % 4];
        let (c, h, l) = [(8, 8, 4), (6, 4, 9), (12, 8, 16), (4, 6, 3)][seed as usize % 4];
        let (cat, mut store) = build(c, h, l, modes, seed);
        jitter(&mut store, 100 + seed, 0.05);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(uniform(&[2, c, h, h], 200 + seed));
        let t = cat.forward_trace(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(t.out), &[2, c, h, h]);

        let attn = g.value(t.attn);
        let hw = h * h;
        for row in attn.data().chunks(hw) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "seed {seed}: row sum {s}");
            assert!(row.iter().all(|&a| a > 0.0 && a < 1.0));
        }

        let tokens = g.value(t.x_p_tokens);
        let tc = g.value(t.t_c);
        for n in 0..2 {
            for ch in 0..c {
                let col = (0..hw).map(|q| tokens.get(&[n, q, ch]));
                let lo = col.clone().fold(f64::INFINITY, f64::min);
                let hi = col.fold(f64::NEG_INFINITY, f64::max);
                for k in 0..l {
                    let v = tc.get(&[n, k, ch]);
                    assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "seed {seed}: T_c outside hull");
                }
            }
        }

        let loss = random_projection(&mut g, t.out, seed).unwrap();
        g.backward(loss).unwrap();
        for (i, name) in store.names().iter().enumerate() {
            let grad = g.grad_tensor(p.0[i]);
            assert!(grad.data().iter().any(|&d| d != 0.0), "seed {seed}: {name} has no gradient");
        }
    }
}

#[test]
fn alpha_and_positional_embedding_get_gradient_from_zero_init() {
    let (cat, store) = build(6, 4, 5, MODES[0], 3);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let x = g.constant(uniform(&[1, 6, 4, 4], 1));
    let y = cat.forward(&mut g, &p, x).unwrap();
    let loss = random_projection(&mut g, y, 2).unwrap();
    g.backward(loss).unwrap();
    let eivit::cat::Alpha::Positional { alpha } = cat.alpha else {
        unreachable!()
    };
    assert!(store.get(alpha).data().iter().all(|&v| v == 0.0));
    assert!(g.grad_tensor(p.var(alpha)).data().iter().any(|&d| d != 0.0));
    assert!(g.grad_tensor(p.var(cat.pe)).data().iter().any(|&d| d != 0.0));
}

#[test]
fn distant_positions_interact() {
    for modes in MODES {
        let (cat, mut store) = build(4, 8, 4, modes, 7);
        jitter(&mut store, 8, 0.05);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let xv = g.param(uniform(&[1, 4, 8, 8], 9));
        let y = cat.forward(&mut g, &p, xv).unwrap();
        let mut sel = Tensor::zeros(&[1, 4, 8, 8]);
        for ch in 0..4 {
            sel.data_mut()[ch * 64] = 1.0;
        }
        let s = g.constant(sel);
        let picked = g.mul(y, s).unwrap();
        let loss = g.sum(picked).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad_tensor(xv);
        let far = (0..4).map(|ch| grad.get(&[0, ch, 7, 7]).abs()).sum::<f64>();
        assert!(far > 0.0, "{modes:?}: site (0,0) ignores (7,7)");
    }
}

#[test]
fn uniform_scores_give_uniform_attention_and_mean_tokens() {
    let (cat, mut store) = build(5, 4, 3, MODES[0], 11);
    let Concepts::Independent { w_con } = cat.concepts else {
        unreachable!()
    };
    store.get_mut(w_con).data_mut().fill(0.0);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let x = g.constant(uniform(&[1, 5, 4, 4], 12));
    let t = cat.forward_trace(&mut g, &p, x).unwrap();
    assert!(g.value(t.attn).data().iter().all(|&a| (a - 1.0 / 16.0).abs() < 1e-15));
    let tokens = g.value(t.x_p_tokens);
    let tc = g.value(t.t_c);
    for ch in 0..5 {
        let mean = (0..16).map(|q| tokens.get(&[0, q, ch])).sum::<f64>() / 16.0;
        for k in 0..3 {
            assert!((tc.get(&[0, k, ch]) - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn concept_tokens_are_attention_weighted_averages() {
    let (cat, mut store) = build(4, 4, 6, MODES[2], 13);
    jitter(&mut store, 14, 0.1);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let x = g.constant(uniform(&[2, 4, 4, 4], 15));
    let t = cat.forward_trace(&mut g, &p, x).unwrap();
    let (attn, tokens, tc, scores) = (g.value(t.attn), g.value(t.x_p_tokens), g.value(t.t_c), g.value(t.attn_s));
    for n in 0..2 {
        for k in 0..6 {
            for ch in 0..4 {
                let naive: f64 = (0..16).map(|q| attn.get(&[n, k, q]) * tokens.get(&[n, q, ch])).sum();
                assert!((naive - tc.get(&[n, k, ch])).abs() < 1e-12);
            }
            let argmax = |t: &Tensor<f64>| {
                (0..16)
                    .max_by(|&a, &b| t.get(&[n, k, a]).total_cmp(&t.get(&[n, k, b])))
                    .unwrap()
            };
            assert_eq!(argmax(attn), argmax(scores));
        }
    }
}

#[test]
fn sharp_attention_pools_a_single_position() {
    let (cat, mut store) = build(3, 4, 1, MODES[0], 16);
    let Concepts::Independent { w_con } = cat.concepts else {
        unreachable!()
    };
    *store.get_mut(w_con) = Tensor::from_f64(vec![3, 1], &[1e4, 0.0, 0.0]).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let x = g.constant(uniform(&[1, 3, 4, 4], 17));
    let t = cat.forward_trace(&mut g, &p, x).unwrap();
    let tokens = g.value(t.x_p_tokens);
    let best = (0..16)
        .max_by(|&a, &b| tokens.get(&[0, a, 0]).total_cmp(&tokens.get(&[0, b, 0])))
        .unwrap();
    for ch in 0..3 {
        assert!((g.value(t.t_c).get(&[0, 0, ch]) - tokens.get(&[0, best, ch])).abs() < 1e-9);
    }
}

#[test]
fn constant_mixed_features_give_identical_concepts() {
    let (cat, mut store) = build(3, 4, 5, MODES[0], 18);
    *store.get_mut(cat.mix.w) = Tensor::from_fn(&[3, 3, 3, 3], |i| {
        let (co, ci, k) = (i / 27, (i / 9) % 3, i % 9);
        if co == ci && k == 4 {
            1.0
        } else {
            0.0
        }
    });
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let x = g.constant(Tensor::full(&[1, 3, 4, 4], 0.8));
    let t = cat.forward_trace(&mut g, &p, x).unwrap();
    let tc = g.value(t.t_c);
    for k in 0..5 {
        for ch in 0..3 {
            assert!((tc.get(&[0, k, ch]) - 0.8).abs() < 1e-12);
        }
    }
}

#[test]
fn backward_flow_is_affine_in_alpha() {
    let (cat, mut store) = build(4, 4, 3, MODES[0], 19);
    jitter(&mut store, 20, 0.3);
    let c_shift = 0.37;
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let attn = g.constant(uniform(&[1, 3, 16], 21).map(|v| v.abs()));
    let a0 = uniform(&[3, 16], 22);
    let alpha0 = g.constant(a0.clone());
    let alpha1 = g.constant(a0.map(|v| v + c_shift));
    let mu0 = cat.backward_flow(&mut g, &p, attn, alpha0).unwrap();
    let mu1 = cat.backward_flow(&mut g, &p, attn, alpha1).unwrap();
    let flow = store.get(cat.flow);
    // flow is a linear weight [L_in, L_out]
    for q in 0..16 {
        for j in 0..3 {
            let expected: f64 = (0..3).map(|i| flow.get(&[i, j]) * c_shift).sum();
            let got = g.value(mu1).get(&[0, q, j]) - g.value(mu0).get(&[0, q, j]);
            assert!((got - expected).abs() < 1e-12);
        }
    }
    let bad = g.constant(Tensor::zeros(&[3, 15]));
    assert!(cat.backward_flow(&mut g, &p, attn, bad).is_err());
}

#[test]
fn zero_mixing_weight_is_pure_linear_path() {
    for modes in MODES {
        let (cat, mut store) = build(4, 4, 3, modes, 23);
        jitter(&mut store, 24, 0.1);
        store.get_mut(cat.w_m.w).data_mut().fill(0.0);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(uniform(&[2, 4, 4, 4], 25));
        let t = cat.forward_trace(&mut g, &p, x).unwrap();
        assert!(g.value(t.phi).data().iter().all(|&v| v == 0.0));
        let lin = cat.w_o.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.value(t.out), g.value(lin));
    }
}

#[test]
fn full_pipeline_gradients_in_every_mode() {
    for (i, modes) in MODES.into_iter().enumerate() {
        let (cat, store) = build(4, 4, 3, modes, 30 + i as u64);
        let np = store.len();
        let mut inputs: Vec<Tensor<f64>> = store.tensors().to_vec();
        let mut rng = InitRng::seed_from_u64(40 + i as u64);
        for t in &mut inputs {
            for v in t.data_mut() {
                *v += 0.1 * rng.gen_range(-1.0..1.0);
            }
        }
        inputs.push(uniform(&[1, 4, 4, 4], 50 + i as u64));
        let opts = GradCheckOptions {
            max_coords_per_input: Some(10),
            seed: i as u64,
            ..Default::default()
        };
        let report = grad_check(
            |g, v| {
                let p = Bound(v[..np].to_vec());
                let y = cat.forward(g, &p, v[np])?;
                random_projection(g, y, 5)
            },
            &inputs,
            &opts,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{modes:?}: rel err {}", report.max_rel_error);
    }
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let (cat, store) = build(6, 4, 4, MODES[3], 60);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(uniform(&[2, 6, 4, 4], 61));
        let y = cat.forward(&mut g, &p, x).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(), run());
}
