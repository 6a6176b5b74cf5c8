use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use reldeepsym::datasets::{generate_records, Batch};
use reldeepsym::gradcore::{grad_check, Graph, Tensor};
use reldeepsym::models::{
    aggregate, attention_logits, forward, loss, predict, relational_forward, Architecture,
    ModelCheckpoint, ModelConfig, ModelError, Mode,
};

mod common;
use common::*;

fn ckpt(arch: Architecture, seed: u64) -> ModelCheckpoint {
    ModelCheckpoint::new(ModelConfig::new(arch), seed).unwrap()
}

fn rows(values: &[f64], n: usize) -> Vec<&[f64]> {
    values.chunks(n).collect()
}

fn hard(ck: &ModelCheckpoint, b: &Batch) -> (Graph, reldeepsym::models::ForwardOutput) {
    let mut g = Graph::inference();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = forward(&mut g, ck, b, Mode::Hard, &mut rng).unwrap();
    (g, out)
}

#[test]
fn output_shapes_for_each_object_count() {
    for arch in Architecture::ALL {
        let ck = ckpt(arch, 1);
        for n in 2..=4 {
            let (_, b) = batch(n, 3, n as u64);
            let (g, out) = hard(&ck, &b);
            assert_eq!(g.shape(out.effects), &[3 * n, 6], "{arch} n={n}");
        }
    }
}

#[test]
fn hard_mode_symbols_and_relations_are_binary() {
    let ck = ckpt(Architecture::Relational, 2);
    let (_, b) = batch(3, 40, 7);
    let (g, out) = hard(&ck, &b);
    let z = g.value(out.symbols.unwrap());
    assert_eq!(z.len(), 3 * 40 * 4);
    assert!(z.iter().all(|&v| v == 0.0 || v == 1.0));
    assert_eq!(out.relations.len(), 4);
    for a in &out.relations {
        assert_eq!(g.shape(*a), &[40, 3, 3]);
        assert!(g.value(*a).iter().all(|&v| v == 0.0 || v == 1.0));
    }
}

#[test]
fn soft_mode_values_inside_open_interval() {
    let ck = ckpt(Architecture::Relational, 2);
    let (_, b) = batch(2, 20, 8);
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let out = forward(&mut g, &ck, &b, Mode::Soft, &mut rng).unwrap();
    assert!(g.value(out.symbols.unwrap()).iter().all(|&v| v > 0.0 && v < 1.0));
    for a in &out.relations {
        assert!(g.value(*a).iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn padded_objects_have_zero_relations() {
    let mut recs = generate_records(2, 2, 3, 0).unwrap();
    recs.extend(generate_records(4, 2, 3, 100).unwrap());
    let b = Batch::from_records(recs.iter());
    let ck = ckpt(Architecture::Relational, 5);
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let out = forward(&mut g, &ck, &b, Mode::Soft, &mut rng).unwrap();
    for a in &out.relations {
        let v = g.value(*a);
        for s in 0..2 {
            for i in 0..4 {
                for l in 0..4 {
                    if i >= 2 || l >= 2 {
                        assert_eq!(v[s * 16 + i * 4 + l], 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn hard_mode_is_deterministic() {
    for arch in Architecture::ALL {
        let ck = ckpt(arch, 3);
        let (_, b) = batch(4, 16, 9);
        assert_eq!(predict(&ck, &b).unwrap(), predict(&ck, &b).unwrap());
    }
}

#[test]
fn permutation_equivariance_is_exact() {
    for arch in [Architecture::Relational, Architecture::Attentive, Architecture::DeepSym] {
        let ck = ckpt(arch, 4);
        for n in 2..=4 {
            let (_, b) = batch(n, 24, 11 + n as u64);
            let perms = random_perms(&b, n as u64);
            let pb = permuted(&b, &perms);
            let (g, out) = hard(&ck, &b);
            let (pg, pout) = hard(&ck, &pb);
            let e = rows(g.value(out.effects), 6);
            let pe = rows(pg.value(pout.effects), 6);
            for (s, p) in perms.iter().enumerate() {
                for (i, &old) in p.iter().enumerate() {
                    assert_eq!(pe[s * n + i], e[s * n + old], "{arch} n={n}");
                }
            }
            for (a, pa) in out.relations.iter().zip(&pout.relations) {
                let (a, pa) = (g.value(*a), pg.value(*pa));
                for (s, p) in perms.iter().enumerate() {
                    for i in 0..n {
                        for l in 0..n {
                            assert_eq!(pa[s * n * n + i * n + l], a[s * n * n + p[i] * n + p[l]]);
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn zeroed_query_gives_empty_relations() {
    let mut ck = ckpt(Architecture::Relational, 6);
    for j in 0..4 {
        for part in ["weight", "bias"] {
            let t = ck.params.get_mut(&format!("attention.query.{j}.{part}")).unwrap();
            t.data_mut().fill(0.0);
        }
    }
    let (_, b) = batch(3, 10, 2);
    let (g, out) = hard(&ck, &b);
    for a in &out.relations {
        assert!(g.value(*a).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn key_scaling_scales_logits() {
    let ck = ckpt(Architecture::Relational, 7);
    let (_, b) = batch(3, 5, 4);
    let c = 2.5;
    let mut scaled = ck.clone();
    for j in 0..4 {
        for part in ["weight", "bias"] {
            let t = scaled.params.get_mut(&format!("attention.key.{j}.{part}")).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }
    let logits = |ck: &ModelCheckpoint| {
        let mut g = Graph::inference();
        let x = g.input(vec![b.rows(), 6], b.features.clone()).unwrap();
        let l = attention_logits(&mut g, &ck.params, &ck.config, x, b.size, b.n_pad).unwrap();
        l.iter().flat_map(|v| g.value(*v).to_vec()).collect::<Vec<_>>()
    };
    let base = logits(&ck);
    let big = logits(&scaled);
    assert!(base.iter().any(|v| v.abs() > 1e-3));
    for (a, b) in base.iter().zip(&big) {
        assert!((b - c * a).abs() <= 1e-12 * (1.0 + b.abs()), "{b} vs {}", c * a);
    }
}

/// Aggregation with a fixture where every head shares the same mlp.
fn aggregate_fixture(a: [[f64; 4]; 4]) -> (Vec<f64>, Vec<f64>) {
    let mut ck = ckpt(Architecture::Relational, 8);
    let shared: Vec<(String, Tensor)> = ck
        .params
        .iter()
        .filter(|(p, _)| p.starts_with("aggregate.0."))
        .map(|(p, t)| (p.clone(), t.clone()))
        .collect();
    for j in 1..4 {
        for (p, t) in &shared {
            let dst = p.replacen("aggregate.0.", &format!("aggregate.{j}."), 1);
            *ck.params.get_mut(&dst).unwrap() = t.clone();
        }
    }
    let mut g = Graph::inference();
    let z = g.input(vec![2, 4], vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let act = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
    let acts = g.input(vec![2, 6], [act, act].concat()).unwrap();
    let rel: Vec<_> = a
        .iter()
        .map(|m| g.input(vec![1, 2, 2], m.to_vec()).unwrap())
        .collect();
    let h = aggregate(&mut g, &ck.params, &ck.config, z, &rel, acts).unwrap();
    let eye: Vec<_> = (0..4)
        .map(|_| g.input(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap())
        .collect();
    let m = aggregate(&mut g, &ck.params, &ck.config, z, &eye, acts).unwrap();
    (g.value(h).to_vec(), g.value(m).to_vec())
}

#[test]
fn aggregation_identity_zero_and_ones() {
    let id = [1.0, 0.0, 0.0, 1.0];
    let (h, m) = aggregate_fixture([id; 4]);
    assert_eq!(h.len(), 2 * 512);
    // identity: every head block equals the shared mlp output for the row
    for r in 0..2 {
        let block = &h[r * 512..r * 512 + 128];
        for j in 1..4 {
            assert_eq!(&h[r * 512 + j * 128..r * 512 + (j + 1) * 128], block);
        }
    }
    assert_eq!(h, m);

    let (h, _) = aggregate_fixture([[0.0; 4]; 4]);
    assert!(h.iter().all(|&v| v == 0.0));

    let (h, m) = aggregate_fixture([[1.0; 4]; 4]);
    for r in 0..2 {
        for c in 0..512 {
            let expect = m[c] + m[512 + c];
            assert!((h[r * 512 + c] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn aggregation_is_linear_in_relations() {
    let a1 = [[1.0, 0.0, 1.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 1.0], [1.0, 1.0, 0.0, 1.0]];
    let a2 = [[0.0, 1.0, 0.0, 1.0], [0.5, 0.0, 0.25, 1.0], [1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]];
    let mut sum = [[0.0; 4]; 4];
    for j in 0..4 {
        for k in 0..4 {
            sum[j][k] = a1[j][k] + a2[j][k];
        }
    }
    let (h1, _) = aggregate_fixture(a1);
    let (h2, _) = aggregate_fixture(a2);
    let (hs, _) = aggregate_fixture(sum);
    for i in 0..hs.len() {
        assert!((hs[i] - h1[i] - h2[i]).abs() < 1e-12);
    }
}

#[test]
fn aggregation_rejects_mismatched_objects() {
    let ck = ckpt(Architecture::Relational, 8);
    let mut g = Graph::inference();
    let z = g.input(vec![3, 4], vec![0.0; 12]).unwrap();
    let acts = g.input(vec![3, 6], vec![0.0; 18]).unwrap();
    let a = g.input(vec![1, 2, 2], vec![1.0; 4]).unwrap();
    assert!(aggregate(&mut g, &ck.params, &ck.config, z, &[a; 4], acts).is_err());
}

#[test]
fn every_parameter_group_receives_gradient() {
    let groups: &[(Architecture, &[&str])] = &[
        (Architecture::Relational, &["encoder", "attention.trunk", "attention.query", "attention.key", "aggregate", "decoder"]),
        (Architecture::Attentive, &["encoder", "attention.query", "attention.key", "attention.value", "decoder"]),
        (Architecture::DeepSym, &["encoder", "decoder"]),
    ];
    for &(arch, prefixes) in groups {
        let ck = ckpt(arch, 10);
        let (_, b) = batch(3, 16, 12);
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = forward(&mut g, &ck, &b, Mode::Soft, &mut rng).unwrap();
        let l = loss(&mut g, out.effects, &b).unwrap();
        let grads = g.backward(l, &ck.params).unwrap();
        for p in prefixes {
            let norm = grads.group_norm(p);
            assert!(norm > 0.0 && norm.is_finite(), "{arch} {p}: {norm}");
        }
    }
}

#[test]
fn relational_gradients_match_finite_differences() {
    let ck = narrow(Architecture::Relational, 21);
    let (_, b) = batch(2, 3, 5);
    let report = grad_check(&ck.params, 1e-4, |g, params| {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut c = ck.clone();
        c.params = params.clone();
        let out = forward(g, &c, &b, Mode::Soft, &mut rng).map_err(to_grad)?;
        loss(g, out.effects, &b).map_err(to_grad)
    })
    .unwrap();
    let worst = report.worst().unwrap();
    assert!(report.max_error() < 1e-3, "{worst:?}");
}

#[test]
fn baseline_gradients_match_finite_differences() {
    for arch in [Architecture::Attentive, Architecture::DeepSym] {
        let ck = narrow(arch, 22);
        let (_, b) = batch(3, 3, 6);
        let report = grad_check(&ck.params, 1e-4, |g, params| {
            let mut rng = ChaCha8Rng::seed_from_u64(98);
            let mut c = ck.clone();
            c.params = params.clone();
            let out = forward(g, &c, &b, Mode::Soft, &mut rng).map_err(to_grad)?;
            loss(g, out.effects, &b).map_err(to_grad)
        })
        .unwrap();
        assert!(report.max_error() < 1e-3, "{arch}: {:?}", report.worst());
    }
}

#[test]
fn attentive_softmax_rows_sum_to_one() {
    let ck = ckpt(Architecture::Attentive, 13);
    let (_, b) = batch(4, 10, 14);
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let out = forward(&mut g, &ck, &b, Mode::Soft, &mut rng).unwrap();
    assert_eq!(out.attention.len(), 4);
    let mut interior = false;
    for a in &out.attention {
        for row in g.value(*a).chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            interior |= row.iter().any(|&v| v > 0.0 && v < 1.0);
        }
    }
    assert!(interior);
}

#[test]
fn wrong_architecture_is_a_contract_error() {
    let ck = ckpt(Architecture::DeepSym, 1);
    let (_, b) = batch(2, 2, 1);
    let mut g = Graph::inference();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        relational_forward(&mut g, &ck, &b, Mode::Hard, &mut rng),
        Err(ModelError::Contract(_))
    ));
}

#[test]
fn deepsym_capacity_and_masking() {
    let small = ModelCheckpoint::new(ModelConfig::new(Architecture::DeepSym).with_n_max(3), 1).unwrap();
    let (_, b4) = batch(4, 2, 1);
    assert!(matches!(predict(&small, &b4), Err(ModelError::Capacity { n: 4, n_max: 3 })));

    // mixed batch: padded rows predict zero, so the masked loss equals the
    // loss over truncated per-sample outputs
    let ck = ckpt(Architecture::DeepSym, 2);
    let mut recs = generate_records(2, 3, 4, 0).unwrap();
    recs.extend(generate_records(4, 3, 4, 50).unwrap());
    let b = Batch::from_records(recs.iter());
    let pred = predict(&ck, &b).unwrap();
    let mut g = Graph::inference();
    let p = g.input(vec![b.rows(), 6], pred.clone()).unwrap();
    let l = loss(&mut g, p, &b).unwrap();
    let mut reference = 0.0;
    for (s, r) in recs.iter().enumerate() {
        let single = Batch::from_records([r]);
        let ps = predict(&ck, &single).unwrap();
        for i in 0..r.n {
            for d in 0..6 {
                assert_eq!(ps[i * 6 + d], pred[(s * 4 + i) * 6 + d]);
                reference += (ps[i * 6 + d] - r.effects[i][d]).powi(2);
            }
        }
    }
    reference /= recs.len() as f64;
    assert!((g.scalar_value(l).unwrap() - reference).abs() < 1e-12);
    for s in 0..3 {
        assert!(pred[(s * 4 + 2) * 6..(s * 4 + 4) * 6].iter().all(|&v| v == 0.0));
    }
}

#[test]
fn loss_matches_double_loop() {
    let (recs, b) = {
        let mut r = generate_records(3, 5, 6, 0).unwrap();
        r.extend(generate_records(2, 4, 6, 10).unwrap());
        let b = Batch::from_records(r.iter());
        (r, b)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pred: Vec<f64> = (0..b.rows() * 6).map(|_| rand::Rng::random_range(&mut rng, -5.0..5.0)).collect();
    let mut g = Graph::inference();
    let p = g.input(vec![b.rows(), 6], pred.clone()).unwrap();
    let l = loss(&mut g, p, &b).unwrap();
    let mut total = 0.0;
    for (s, r) in recs.iter().enumerate() {
        for i in 0..r.n {
            for d in 0..6 {
                let diff = pred[(s * b.n_pad + i) * 6 + d] - r.effects[i][d];
                total += diff * diff;
            }
        }
    }
    total /= recs.len() as f64;
    assert!((g.scalar_value(l).unwrap() - total).abs() < 1e-12);
}
