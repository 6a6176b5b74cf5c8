//! Fixtures and brute-force references shared by the integration tests.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reldeepsym::datasets::{generate_records, Batch, SampleRecord};
use reldeepsym::gradcore::{GradError, Graph, Tensor, Var};
use reldeepsym::models::{Architecture, ModelCheckpoint, ModelConfig, ModelError};
use reldeepsym::simenv::{carry_height, check_invariants, dump_scene, grasp_success, is_settled, ActionSpec, EffectRecord, WorldState};

/// Finite-difference step for primitive checks.
pub const EPS: f64 = 1e-5;
/// Required agreement of primitive gradients with finite differences.
pub const PRIMITIVE_TOL: f64 = 1e-6;
/// Agreement required between a metric and its reference.
pub const ORACLE_TOL: f64 = 1e-9;

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Values bounded away from zero, so ReLU kinks are never crossed by a probe.
pub fn off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) { v } else { -v }
        })
        .collect()
}

/// Scalarises `build` with a fixed random weighting and compares the tape
/// gradient of every input with a central difference.
pub fn check_op(inputs: &[(Vec<usize>, Vec<f64>)], build: &Build) -> f64 {
    let scalar = |vals: &[Vec<f64>], want_grads: bool| -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let leaves: Vec<Var> = inputs
            .iter()
            .zip(vals)
            .map(|((s, _), v)| g.leaf(&Tensor::new(s.clone(), v.clone()).unwrap().with_requires_grad(true)))
            .collect();
        let out = build(&mut g, &leaves).unwrap();
        let n = g.value(out).len();
        let weights = rand_vec(&mut ChaCha8Rng::seed_from_u64(5), n);
        let wv = g.input(g.shape(out).to_vec(), weights).unwrap();
        let prod = g.mul(out, wv).unwrap();
        let loss = g.sum(prod);
        let grads = if want_grads {
            leaves.iter().map(|&l| g.grad_of(loss, l).unwrap()).collect()
        } else {
            vec![]
        };
        (g.scalar_value(loss).unwrap(), grads)
    };
    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
    let (_, analytic) = scalar(&base, true);
    let mut worst: f64 = 0.0;
    for k in 0..base.len() {
        for i in 0..base[k].len() {
            let mut plus = base.clone();
            plus[k][i] += EPS;
            let mut minus = base.clone();
            minus[k][i] -= EPS;
            let numeric = (scalar(&plus, false).0 - scalar(&minus, false).0) / (2.0 * EPS);
            let a = analytic[k][i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            worst = worst.max(err);
        }
    }
    worst
}

pub type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var, GradError>;

/// First property of a single transition that does not hold, if any.
pub fn transition_violation(before: &WorldState, a: &ActionSpec, after: &WorldState, e: &EffectRecord) -> Option<String> {
    macro_rules! ensure {
        ($cond:expr, $($msg:tt)*) => {
            if !$cond {
                return Some(format!($($msg)*));
            }
        };
    }
    if let Err(v) = check_invariants(after) {
        return Some(format!("{v:?}\n{}", dump_scene(after)));
    }
    ensure!(is_settled(after), "result not settled");
    ensure!(after.blocks.len() == before.blocks.len(), "block count changed");
    for (b0, b1) in before.blocks.iter().zip(&after.blocks) {
        ensure!(b0.kind == b1.kind, "block kind changed");
    }
    if !grasp_success(before, a.grasp_index, a.grasp_offset) {
        ensure!(e.is_zero(), "failed grasp with nonzero effect");
        ensure!(before == after, "failed grasp moved a block");
        return None;
    }
    let g = a.grasp_index;
    for (i, row) in e.per_object.iter().enumerate() {
        // pick effects only move things vertically
        ensure!(row[0] == 0.0 && row[1] == 0.0 && row[2].is_finite(), "object {i}: pick moved sideways");
        if i != g {
            ensure!(row[2] <= 0.0, "non-grasped block {i} rose");
            ensure!(row[3..] == [0.0; 3], "non-grasped block {i} has release effect");
        } else {
            ensure!(row[2] > 0.0, "grasped block did not rise");
            ensure!(row[3] == 0.0 && row[4] == 0.0 && row[5] <= 0.0, "release effect {:?}", &row[3..]);
        }
    }
    // grasped block ends centred on the target's post-pick footprint
    let t = a.target_index;
    let target_x = before.blocks[t].pos[0] + e.per_object[t][0] + a.release_offset;
    ensure!(after.blocks[g].pos[0] == target_x, "release x");
    ensure!(after.blocks[g].pos[1] == before.blocks[t].pos[1], "release y");
    // release height is the carry height plus the release drop
    let z = carry_height(before.blocks[g].kind) + e.per_object[g][5];
    ensure!((after.blocks[g].pos[2] - z).abs() < 1e-12, "release z");
    None
}

/// Runs random episodes until `executions` actions have been executed.
/// Returns the number of successful grasps and the first violation.
pub fn random_executions(executions: usize) -> (usize, usize, Option<String>) {
    use reldeepsym::simenv::{execute, spawn_scene};
    let (mut executed, mut grasped) = (0, 0);
    let mut ep = 0u64;
    while executed < executions {
        let mut rng = ChaCha8Rng::seed_from_u64(ep);
        let n = 2 + (ep % 3) as usize;
        let mut state = spawn_scene(n, &mut rng).unwrap();
        if check_invariants(&state).is_err() || !is_settled(&state) {
            return (executed, grasped, Some(format!("spawned scene {ep} violates invariants")));
        }
        for _ in 0..20 {
            let a = ActionSpec::random(n, &mut rng);
            let (next, e) = execute(&state, &a).unwrap();
            if let Some(v) = transition_violation(&state, &a, &next, &e) {
                return (executed, grasped, Some(v));
            }
            grasped += !e.is_zero() as usize;
            state = next;
            executed += 1;
        }
        ep += 1;
    }
    (executed, grasped, None)
}

/// Discrepancy relative to the larger magnitude, absolute below 1.
pub fn gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

pub fn close(a: f64, b: f64) -> bool {
    gap(a, b) <= ORACLE_TOL
}

/// Random labelled records with 2 to 4 objects (feature values do not
/// matter to the metrics).
pub fn random_records(rng: &mut ChaCha8Rng, count: usize) -> Vec<SampleRecord> {
    let pool: Vec<SampleRecord> = (2..=4).flat_map(|n| generate_records(n, 20, 3, 0).unwrap()).collect();
    (0..count)
        .map(|_| {
            let mut r = pool[rng.random_range(0..pool.len())].clone();
            for row in &mut r.effects {
                for v in row.iter_mut() {
                    *v = rng.random_range(-25.0..25.0);
                }
            }
            r
        })
        .collect()
}

/// Predictions laid out like the batch, padding rows filled with junk that
/// must not count.
pub fn random_predictions(rng: &mut ChaCha8Rng, recs: &[SampleRecord], n_pad: usize) -> (Vec<f64>, Vec<Vec<[f64; 6]>>) {
    let mut flat = vec![0.0; recs.len() * n_pad * 6];
    let mut per = Vec::new();
    for (s, r) in recs.iter().enumerate() {
        let mut rows = Vec::new();
        for i in 0..n_pad {
            let mut row = [0.0; 6];
            for v in &mut row {
                *v = rng.random_range(-25.0..25.0);
            }
            flat[(s * n_pad + i) * 6..][..6].copy_from_slice(&row);
            if i < r.n {
                rows.push(row);
            }
        }
        per.push(rows);
    }
    (flat, per)
}

/// Regularised incomplete beta by Lentz's continued fraction.
pub fn betai(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = lgamma(a + b) - lgamma(a) - lgamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * betacf(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * betacf(b, a, 1.0 - x) / b
    }
}

pub fn betacf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        d = if d.abs() < TINY { TINY } else { d };
        c = 1.0 + aa / c;
        c = if c.abs() < TINY { TINY } else { c };
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        d = if d.abs() < TINY { TINY } else { d };
        c = 1.0 + aa / c;
        c = if c.abs() < TINY { TINY } else { c };
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Lanczos approximation (g = 7, n = 9).
pub fn lgamma(x: f64) -> f64 {
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        return (std::f64::consts::PI / (std::f64::consts::PI * x).sin()).ln() - lgamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut s = C[0];
    for (i, c) in C.iter().enumerate().skip(1) {
        s += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + s.ln()
}

pub fn reference_welch(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let stats = |x: &[f64]| {
        let n = x.len() as f64;
        let mut m = 0.0;
        for v in x {
            m += v;
        }
        m /= n;
        let mut ss = 0.0;
        for v in x {
            ss += (v - m) * (v - m);
        }
        (m, ss / (n - 1.0), n)
    };
    let (ma, va, na) = stats(a);
    let (mb, vb, nb) = stats(b);
    let (qa, qb) = (va / na, vb / nb);
    let t = (ma - mb) / (qa + qb).sqrt();
    let df = (qa + qb).powi(2) / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
    // two-sided tail of Student's t: I_{df/(df+t^2)}(df/2, 1/2)
    let p = betai(df / 2.0, 0.5, df / (df + t * t));
    (t, df, p)
}

/// Narrow model with small random biases, so that no ReLU input sits exactly
/// on the kink at zero.
pub fn narrow(arch: Architecture, seed: u64) -> ModelCheckpoint {
    let mut ck = ModelCheckpoint::new(ModelConfig::narrow(arch, 6), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (path, t) in ck.params.iter_mut() {
        if path.ends_with(".bias") {
            t.data_mut().iter_mut().for_each(|v| *v = rand::Rng::random_range(&mut rng, -0.1..0.1));
        }
    }
    ck
}

pub fn batch(n: usize, count: usize, seed: u64) -> (Vec<SampleRecord>, Batch) {
    let recs = generate_records(n, count, seed, 0).unwrap();
    let b = Batch::from_records(recs.iter());
    (recs, b)
}

/// The batch with every sample's objects reordered by `perm[s]`: new row
/// `i` is old row `perm[s][i]`.
pub fn permuted(b: &Batch, perm: &[Vec<usize>]) -> Batch {
    let mut out = b.clone();
    for (s, p) in perm.iter().enumerate() {
        let mut inverse = vec![0; p.len()];
        for (i, &old) in p.iter().enumerate() {
            inverse[old] = i;
            let dst = (s * b.n_pad + i) * 6;
            out.features[dst..dst + 6].copy_from_slice(b.feature_row(s, old));
            out.effects[dst..dst + 6].copy_from_slice(b.effect_row(s, old));
        }
        let (gr, tg) = b.roles[s];
        out.roles[s] = (inverse[gr], inverse[tg]);
    }
    out
}

pub fn random_perms(b: &Batch, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..b.size)
        .map(|_| {
            let mut p: Vec<usize> = (0..b.n_pad).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect()
}

pub fn to_grad(e: ModelError) -> GradError {
    GradError::Contract(e.to_string())
}

/// Worst finite-difference error of every differentiable primitive.
pub fn primitive_errors() -> Vec<(&'static str, f64)> {
    let check = |name: &'static str, inputs: &[(Vec<usize>, Vec<f64>)], build: &Build| (name, check_op(inputs, build));
    let mut out = Vec::new();
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let m = |r: &mut ChaCha8Rng, a: usize, b: usize| (vec![a, b], rand_vec(r, a * b));

    out.push(check("matmul", &[m(&mut r, 3, 4), m(&mut r, 4, 5)], &|g, v| g.matmul(v[0], v[1])));
    let a3 = (vec![2, 3, 4], rand_vec(&mut r, 24));
    let b3 = (vec![2, 4, 3], rand_vec(&mut r, 24));
    let bt = (vec![2, 5, 4], rand_vec(&mut r, 40));
    out.push(check("batch_matmul", &[a3.clone(), b3], &|g, v| g.batch_matmul(v[0], v[1], false)));
    out.push(check("batch_matmul_t", &[a3, bt], &|g, v| g.batch_matmul(v[0], v[1], true)));
    out.push(check("add_bias", &[m(&mut r, 3, 4), (vec![4], rand_vec(&mut r, 4))], &|g, v| g.add_bias(v[0], v[1])));
    out.push(check("add", &[m(&mut r, 2, 3), m(&mut r, 2, 3)], &|g, v| g.add(v[0], v[1])));
    out.push(check("sub", &[m(&mut r, 2, 3), m(&mut r, 2, 3)], &|g, v| g.sub(v[0], v[1])));
    out.push(check("mul", &[m(&mut r, 2, 3), m(&mut r, 2, 3)], &|g, v| g.mul(v[0], v[1])));
    out.push(check("scale", &[m(&mut r, 2, 3)], &|g, v| Ok(g.scale(v[0], -2.5))));
    out.push(check("relu", &[(vec![3, 4], off_zero(&mut r, 12))], &|g, v| Ok(g.relu(v[0]))));
    out.push(check("sigmoid", &[m(&mut r, 3, 4)], &|g, v| Ok(g.sigmoid(v[0]))));
    out.push(check("square", &[m(&mut r, 3, 4)], &|g, v| Ok(g.square(v[0]))));
    out.push(check("sum", &[m(&mut r, 3, 4)], &|g, v| Ok(g.sum(v[0]))));
    out.push(check("mean", &[m(&mut r, 3, 4)], &|g, v| Ok(g.mean(v[0]))));
    let noise = rand_vec(&mut r, 12);
    out.push(check("gumbel_sigmoid", &[m(&mut r, 3, 4)], &move |g, v| g.gumbel_sigmoid(v[0], &noise, 0.7)));
    out.push(check("concat_cols", &[m(&mut r, 3, 2), m(&mut r, 3, 4)], &|g, v| g.concat_cols(&[v[0], v[1], v[0]])));
    out.push(check("reshape", &[m(&mut r, 3, 4)], &|g, v| g.reshape(v[0], vec![2, 6])));
    out.push(check("gather_rows", &[m(&mut r, 3, 4)], &|g, v| {
        g.gather_rows(v[0], vec![Some(2), None, Some(0), Some(2)])
    }));
    out.push(check("gather", &[m(&mut r, 3, 4)], &|g, v| {
        g.gather(v[0], vec![2, 3], vec![Some(11), Some(0), None, Some(5), Some(5), Some(7)])
    }));
    out.push(check("softmax", &[m(&mut r, 3, 4)], &|g, v| g.softmax_last(v[0], None)));
    let mask = vec![true, false, true, true, false, false, false, false, true, true, true, false];
    out.push(check("softmax_masked", &[m(&mut r, 3, 4)], &move |g, v| g.softmax_last(v[0], Some(&mask))));
    out
}

/// Worst gap between `loss` and a double loop over real objects.
pub fn loss_oracle_gap(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let size = rng.random_range(1..6);
        let recs = random_records(&mut rng, size);
        let b = Batch::from_records(&recs);
        let (flat, per) = random_predictions(&mut rng, &recs, b.n_pad);
        let mut want = 0.0;
        for (r, p) in recs.iter().zip(&per) {
            for i in 0..r.n {
                for d in 0..6 {
                    want += (p[i][d] - r.effects[i][d]).powi(2);
                }
            }
        }
        want /= size as f64;
        let mut g = Graph::inference();
        let pv = g.input(vec![b.rows(), 6], flat).unwrap();
        let l = reldeepsym::models::loss(&mut g, pv, &b).unwrap();
        worst = worst.max(gap(g.scalar_value(l).unwrap(), want));
    }
    worst
}

/// Worst gap of the batched L1 effect error against a per-object sum over
/// `cases` random batches, and of the model-level mean over `cases` records.
pub fn effect_error_oracle_gap(cases: usize, seed: u64) -> f64 {
    use reldeepsym::evals::{batch_effect_error, effect_error};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let size = rng.random_range(1..6);
        let recs = random_records(&mut rng, size);
        let b = Batch::from_records(&recs);
        let (flat, per) = random_predictions(&mut rng, &recs, b.n_pad);
        let mut total = 0.0;
        let mut objects = 0;
        for (r, p) in recs.iter().zip(&per) {
            for i in 0..r.n {
                total += (0..6).map(|d| (p[i][d] - r.effects[i][d]).abs()).sum::<f64>();
                objects += 1;
            }
        }
        let (got, n) = batch_effect_error(&flat, &b);
        if n != objects {
            return f64::INFINITY;
        }
        worst = worst.max(gap(got, total));
    }
    let ck = ModelCheckpoint::new(ModelConfig::narrow(Architecture::DeepSym, 16), seed).unwrap();
    let recs = random_records(&mut rng, cases);
    let mut total = 0.0;
    let mut objects = 0;
    for r in &recs {
        let p = reldeepsym::models::predict(&ck, &Batch::from_records([r])).unwrap();
        for i in 0..r.n {
            total += (0..6).map(|d| (p[i * 6 + d] - r.effects[i][d]).abs()).sum::<f64>();
        }
        objects += r.n;
    }
    worst.max(gap(effect_error(&ck, &recs).unwrap(), total / objects as f64))
}

/// Worst gap of `welch_t` (t, df and p) against the reference.
pub fn welch_oracle_gap(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (na, nb) = (rng.random_range(2..12), rng.random_range(2..12));
        let (ca, cb) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let (sa, sb) = (rng.random_range(0.01..2.0), rng.random_range(0.01..2.0));
        let a: Vec<f64> = (0..na).map(|_| ca + sa * rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..nb).map(|_| cb + sb * rng.random_range(-1.0..1.0)).collect();
        let (t, df, p) = reference_welch(&a, &b);
        let got = reldeepsym::evals::welch_t(&a, &b).unwrap();
        worst = worst.max(gap(got.t, t)).max(gap(got.df, df)).max((got.p - p).abs());
    }
    worst
}
