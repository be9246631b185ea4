//! Seeded parameter initialization.
//!
//! Mirrors libtorch's defaults (uniform ±1/√fan_in for conv/linear weights
//! and biases, unit/zero batch-norm affine parameters) but draws from a
//! ChaCha stream so a given seed always yields the same parameters.

use std::collections::HashMap;

use tch::{nn, Tensor};

use crate::rng;

pub fn reinit(vs: &nn::VarStore, seed: u64) {
    let vars = vs.variables();
    let mut names: Vec<&String> = vars.keys().collect();
    names.sort();
    let mut r = rng::rng(seed);
    tch::no_grad(|| {
        for name in names {
            let t = &vars[name];
            let value = init_value(name, t, &vars, &mut r);
            let mut dst = t.shallow_clone();
            dst.copy_(&value.to_kind(t.kind()).to_device(t.device()));
        }
    });
}

fn prefix(name: &str) -> &str {
    name.rsplit_once('.').map(|(p, _)| p).unwrap_or("")
}

fn fan_in(weight: &Tensor) -> i64 {
    let s = weight.size();
    s[1..].iter().product::<i64>().max(1)
}

fn init_value(
    name: &str,
    t: &Tensor,
    vars: &HashMap<String, Tensor>,
    r: &mut rng::SeedRng,
) -> Tensor {
    let kind = t.kind();
    let shape = t.size();
    let p = prefix(name);
    let sibling = |leaf: &str| {
        let key = if p.is_empty() { leaf.to_string() } else { format!("{p}.{leaf}") };
        vars.get(&key)
    };
    let leaf = name.rsplit('.').next().unwrap_or(name);
    let is_bn = sibling("running_mean").is_some();
    match leaf {
        "running_mean" => Tensor::zeros(shape.as_slice(), (kind, t.device())),
        "running_var" => Tensor::ones(shape.as_slice(), (kind, t.device())),
        "num_batches_tracked" => Tensor::zeros(shape.as_slice(), (kind, t.device())),
        "weight" if is_bn => Tensor::ones(shape.as_slice(), (kind, t.device())),
        "bias" if is_bn => Tensor::zeros(shape.as_slice(), (kind, t.device())),
        "weight" if shape.len() >= 2 => {
            let b = 1.0 / (fan_in(t) as f64).sqrt();
            rng::uniform(r, &shape, -b, b, kind)
        }
        "bias" => {
            let b = match sibling("weight") {
                Some(w) if w.dim() >= 2 => 1.0 / (fan_in(w) as f64).sqrt(),
                _ => 0.0,
            };
            if b == 0.0 {
                Tensor::zeros(shape.as_slice(), (kind, t.device()))
            } else {
                rng::uniform(r, &shape, -b, b, kind)
            }
        }
        // spectral-norm power-iteration vectors and anything else
        _ => {
            let v = rng::randn(r, &shape, kind);
            let n = v.norm().double_value(&[]).max(1e-12);
            v / n
        }
    }
}
