//! Analytic gradients against central finite differences of an independently
//! written loss function.

use fedqot_core::nn::{self, Batch, ModelSpec, ParameterVector};
use fedqot_core::rng::SplitMix64;
use proptest::prelude::*;

/// Straightforward re-implementation of the forward pass and mean
/// cross-entropy, written against the documented parameter layout only.
/// Returns the loss and the smallest |pre-activation| seen in hidden layers.
fn reference_loss(widths: &[usize], params: &[f64], x: &[f64], y: &[u8]) -> (f64, f64) {
    let n = y.len();
    let d = widths[0];
    let mut total = 0.0;
    let mut closest_kink = f64::INFINITY;
    for s in 0..n {
        let mut act: Vec<f64> = x[s * d..(s + 1) * d].to_vec();
        let mut offset = 0;
        for l in 0..widths.len() - 1 {
            let (fi, fo) = (widths[l], widths[l + 1]);
            let w = &params[offset..offset + fi * fo];
            let b = &params[offset + fi * fo..offset + fi * fo + fo];
            offset += fi * fo + fo;
            let mut next = vec![0.0; fo];
            for o in 0..fo {
                let mut z = b[o];
                for i in 0..fi {
                    z += w[o * fi + i] * act[i];
                }
                next[o] = z;
            }
            if l + 2 < widths.len() {
                for z in next.iter_mut() {
                    closest_kink = closest_kink.min(z.abs());
                    *z = z.max(0.0);
                }
            }
            act = next;
        }
        let m = act.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + act.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        total += lse - act[y[s] as usize];
    }
    (total / n as f64, closest_kink)
}

struct Instance {
    widths: Vec<usize>,
    params: Vec<f64>,
    x: Vec<f64>,
    y: Vec<u8>,
}

/// Random network (dims <= 8) and batch (<= 16 rows). Redraws while any hidden
/// pre-activation sits within 1e-3 of the ReLU kink, where finite differences
/// are not a valid oracle.
fn random_instance(seed: u64) -> Instance {
    let mut rng = SplitMix64::new(seed);
    loop {
        let depth = 1 + rng.below(3) as usize;
        let mut widths: Vec<usize> = (0..=depth).map(|_| 1 + rng.below(8) as usize).collect();
        let classes = 2 + rng.below(2) as usize;
        *widths.last_mut().unwrap() = classes;
        let count: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let params: Vec<f64> = (0..count).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
        let rows = 1 + rng.below(16) as usize;
        let x: Vec<f64> = (0..rows * widths[0]).map(|_| rng.next_f64() * 4.0 - 2.0).collect();
        let y: Vec<u8> = (0..rows).map(|_| rng.below(classes as u64) as u8).collect();
        let (_, kink) = reference_loss(&widths, &params, &x, &y);
        if kink > 1e-3 {
            return Instance { widths, params, x, y };
        }
    }
}

/// Largest violation ratio of |analytic - fd| <= max(1e-6 * scale, 1e-8); <= 1 passes.
fn check(inst: &Instance) -> f64 {
    let w = &inst.widths;
    let spec = ModelSpec::new(w[0], w[1..w.len() - 1].to_vec(), *w.last().unwrap()).unwrap();
    let params = ParameterVector::new(spec, inst.params.clone()).unwrap();
    let batch = Batch::new(&inst.x, &inst.y, w[0]).unwrap();
    let (loss, grad) = nn::loss_and_grad(&params, &batch).unwrap();
    let (ref_loss, _) = reference_loss(w, &inst.params, &inst.x, &inst.y);
    assert!((loss - ref_loss).abs() <= 1e-12 * ref_loss.abs().max(1.0));

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for j in 0..inst.params.len() {
        let mut plus = inst.params.clone();
        let mut minus = inst.params.clone();
        plus[j] += h;
        minus[j] -= h;
        let fd = (reference_loss(w, &plus, &inst.x, &inst.y).0 - reference_loss(w, &minus, &inst.x, &inst.y).0)
            / (2.0 * h);
        let a = grad.values[j];
        let bound = (1e-6 * a.abs().max(fd.abs())).max(1e-8);
        worst = worst.max((a - fd).abs() / bound);
    }
    worst
}

#[test]
fn twenty_five_random_networks() {
    for seed in 0..25 {
        let inst = random_instance(1000 + seed);
        let worst = check(&inst);
        assert!(worst <= 1.0, "seed {seed}, widths {:?}: violation ratio {worst}", inst.widths);
    }
}

#[test]
fn loss_is_nonnegative_and_probabilities_normalized() {
    for seed in 0..50 {
        let inst = random_instance(seed);
        let w = &inst.widths;
        let spec = ModelSpec::new(w[0], w[1..w.len() - 1].to_vec(), *w.last().unwrap()).unwrap();
        let params = ParameterVector::new(spec, inst.params.clone()).unwrap();
        let batch = Batch::new(&inst.x, &inst.y, w[0]).unwrap();
        for row in nn::forward(&params, &batch).unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(row.iter().all(|p| *p > 0.0 && *p < 1.0));
        }
        assert!(nn::mean_loss(&params, &batch).unwrap() >= 0.0);
    }
}

#[test]
fn duplicated_batch_gives_same_loss_and_gradient() {
    for seed in 0..10 {
        let inst = random_instance(500 + seed);
        let w = &inst.widths;
        let spec = ModelSpec::new(w[0], w[1..w.len() - 1].to_vec(), *w.last().unwrap()).unwrap();
        let params = ParameterVector::new(spec, inst.params.clone()).unwrap();
        let (l1, g1) = nn::loss_and_grad(&params, &Batch::new(&inst.x, &inst.y, w[0]).unwrap()).unwrap();
        let x2 = [inst.x.clone(), inst.x.clone()].concat();
        let y2 = [inst.y.clone(), inst.y.clone()].concat();
        let (l2, g2) = nn::loss_and_grad(&params, &Batch::new(&x2, &y2, w[0]).unwrap()).unwrap();
        assert!((l1 - l2).abs() <= 1e-12 * l1.max(1.0));
        for (a, b) in g1.values.iter().zip(&g2.values) {
            assert!((a - b).abs() <= 1e-12 * a.abs() + 1e-14);
        }
    }
}

#[test]
fn small_step_decreases_loss() {
    for seed in 0..30 {
        let inst = random_instance(2000 + seed);
        let w = &inst.widths;
        let spec = ModelSpec::new(w[0], w[1..w.len() - 1].to_vec(), *w.last().unwrap()).unwrap();
        let params = ParameterVector::new(spec, inst.params.clone()).unwrap();
        let batch = Batch::new(&inst.x, &inst.y, w[0]).unwrap();
        let (loss, grad) = nn::loss_and_grad(&params, &batch).unwrap();
        if grad.values.iter().all(|g| g.abs() < 1e-9) {
            continue;
        }
        let next = nn::sgd_step(&params, &grad, 1e-4).unwrap();
        assert!(nn::mean_loss(&next, &batch).unwrap() < loss, "seed {seed}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gradient_matches_finite_differences(seed in any::<u64>()) {
        let inst = random_instance(seed);
        prop_assert!(check(&inst) <= 1.0);
    }

    #[test]
    fn blob_round_trip(seed in any::<u64>(), i in 1usize..9, h in 1usize..9, o in 1usize..4) {
        let spec = ModelSpec::new(i, vec![h], o).unwrap();
        let p = nn::init_params(&spec, seed);
        let blob = nn::serialize_params(&p);
        prop_assert_eq!(blob.len(), nn::blob_len(&spec));
        prop_assert!(nn::deserialize_params(&blob, &spec).unwrap().bits_eq(&p));
    }
}
