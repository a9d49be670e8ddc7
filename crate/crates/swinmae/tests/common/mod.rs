//! Shared test support: central-difference gradient oracle and helpers.
//!
//! The oracle only ever calls forward passes, so it stays independent of the
//! backward implementations it checks.

#![allow(dead_code)]

use swinmae::store::{GradStore, ParamStore};

/// Central finite difference: `eval` writes the probed value into place and
/// returns the loss. The base value is restored afterwards.
pub fn central_diff<E>(mut eval: E, base: f64, eps: f64) -> f64
where
    E: FnMut(f64) -> f64,
{
    let up = eval(base + eps);
    let down = eval(base - eps);
    eval(base);
    (up - down) / (2.0 * eps)
}

/// Relative error with a floor so near-zero gradient pairs compare sanely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Debug, Clone)]
pub struct WorstEntry {
    pub rel: f64,
    pub what: String,
    pub analytic: f64,
    pub numeric: f64,
}

impl WorstEntry {
    pub fn none() -> Self {
        WorstEntry {
            rel: 0.0,
            what: "nothing checked".into(),
            analytic: 0.0,
            numeric: 0.0,
        }
    }

    pub fn update(&mut self, rel: f64, what: String, analytic: f64, numeric: f64) {
        if rel > self.rel {
            *self = WorstEntry {
                rel,
                what,
                analytic,
                numeric,
            };
        }
    }
}

/// Check every analytic parameter gradient against central differences of a
/// forward-only loss. At most `per_tensor` evenly spaced entries per tensor
/// are probed (0 = all). Returns the worst relative error seen.
pub fn check_param_grads<F>(
    params: &ParamStore<f64>,
    grads: &GradStore<f64>,
    loss: F,
    eps: f64,
    per_tensor: usize,
) -> WorstEntry
where
    F: Fn(&ParamStore<f64>) -> f64,
{
    let mut worst = WorstEntry::none();
    for (name, tensor) in params.iter() {
        let g = grads
            .get(name)
            .unwrap_or_else(|| panic!("no gradient recorded for {name}"));
        assert_eq!(g.shape(), tensor.shape(), "gradient shape of {name}");
        let len = tensor.len();
        let stride = if per_tensor == 0 {
            1
        } else {
            (len / per_tensor).max(1)
        };
        let mut probe = params.clone();
        for i in (0..len).step_by(stride) {
            let base = tensor.data()[i];
            let numeric = central_diff(
                |v| {
                    probe.get_mut(name).data_mut()[i] = v;
                    loss(&probe)
                },
                base,
                eps,
            );
            worst.update(
                rel_err(g.data()[i], numeric),
                format!("{name}[{i}]"),
                g.data()[i],
                numeric,
            );
        }
    }
    worst
}

/// Check an analytic input gradient against central differences.
pub fn check_input_grad<F>(x: &[f64], dx: &[f64], loss: F, eps: f64, stride: usize) -> WorstEntry
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(x.len(), dx.len());
    let mut worst = WorstEntry::none();
    let mut probe = x.to_vec();
    for i in (0..x.len()).step_by(stride.max(1)) {
        let base = x[i];
        let numeric = central_diff(
            |v| {
                probe[i] = v;
                loss(&probe)
            },
            base,
            eps,
        );
        worst.update(
            rel_err(dx[i], numeric),
            format!("input[{i}]"),
            dx[i],
            numeric,
        );
    }
    worst
}

/// Overwrite every tensor with uniform draws in [-scale, scale]; the default
/// truncated-normal init is too small to condition gradient checks well.
pub fn randomize_params(params: &mut ParamStore<f64>, seed: u64, scale: f64) {
    use rand::Rng;
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let mut rng = swinmae::rng::rng_from(seed, "gradcheck-param", &[fnv(&name)]);
        for v in params.get_mut(&name).data_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
}

fn fnv(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in s.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Deterministic uniform buffer.
pub fn uniform_vec(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    use rand::Rng;
    let mut rng = swinmae::rng::rng_from(seed, "gradcheck-x", &[]);
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}
