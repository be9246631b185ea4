//! Differentiable augmentation: color jitter, translation and cutout.
//! Random parameters come from the seed; the transforms themselves are
//! plain tensor ops so gradients reach the input pixels.

use rand::Rng;
use tch::{Kind, Tensor};

use super::config::AugOp;
use crate::error::{Error, Result};
use crate::rng;

const TRANSLATION_RATIO: f64 = 0.125;
const CUTOUT_RATIO: f64 = 0.5;

pub fn diff_augment(x: &Tensor, policy: &[AugOp], seed: u64) -> Result<Tensor> {
    if x.dim() != 4 {
        return Err(Error::Dimension(format!("diff_augment expects (B, C, H, W), got {:?}", x.size())));
    }
    if policy.is_empty() || x.size()[0] == 0 {
        return Ok(x.shallow_clone());
    }
    let mut r = rng::rng(seed);
    let mut out = x.shallow_clone();
    for op in policy {
        out = match op {
            AugOp::Color => color(&out, &mut r),
            AugOp::Translation => translation(&out, &mut r),
            AugOp::Cutout => cutout(&out, &mut r),
        };
    }
    Ok(out)
}

/// Like [`diff_augment`] but with policy names, rejecting unknown entries.
pub fn diff_augment_named(x: &Tensor, policy: &[&str], seed: u64) -> Result<Tensor> {
    let ops = policy.iter().map(|s| AugOp::parse(s)).collect::<Result<Vec<_>>>()?;
    diff_augment(x, &ops, seed)
}

fn per_sample(r: &mut rng::SeedRng, b: i64, lo: f64, hi: f64, kind: Kind) -> Tensor {
    rng::uniform(r, &[b, 1, 1, 1], lo, hi, kind)
}

fn color(x: &Tensor, r: &mut rng::SeedRng) -> Tensor {
    let b = x.size()[0];
    let kind = x.kind();
    // brightness
    let x = x + per_sample(r, b, -0.5, 0.5, kind);
    // saturation
    let m = x.mean_dim(&[1i64][..], true, None);
    let x = (&x - &m) * per_sample(r, b, 0.0, 2.0, kind) + &m;
    // contrast
    let m = x.mean_dim(&[1i64, 2, 3][..], true, None);
    (&x - &m) * per_sample(r, b, 0.5, 1.5, kind) + &m
}

/// Integer shift of up to `ratio·side` pixels per sample, zero-filled.
fn translation(x: &Tensor, r: &mut rng::SeedRng) -> Tensor {
    let [b, c, h, w] = <[i64; 4]>::try_from(x.size()).unwrap();
    let sh = (h as f64 * TRANSLATION_RATIO + 0.5) as i64;
    let sw = (w as f64 * TRANSLATION_RATIO + 0.5) as i64;
    let (hp, wp) = (h + 2, w + 2);
    let mut idx = Vec::with_capacity((b * h * w) as usize);
    for _ in 0..b {
        let tx = r.gen_range(-sh..=sh);
        let ty = r.gen_range(-sw..=sw);
        for i in 0..h {
            for j in 0..w {
                let si = (i + tx + 1).clamp(0, hp - 1);
                let sj = (j + ty + 1).clamp(0, wp - 1);
                idx.push(si * wp + sj);
            }
        }
    }
    let padded = x.constant_pad_nd([1, 1, 1, 1]).reshape([b, c, hp * wp]);
    let idx = Tensor::from_slice(&idx).view([b, 1, h * w]).expand([b, c, h * w], false);
    padded.gather(2, &idx, false).view([b, c, h, w])
}

/// Zeroes one square of side `ratio·side` per sample.
fn cutout(x: &Tensor, r: &mut rng::SeedRng) -> Tensor {
    let [b, _, h, w] = <[i64; 4]>::try_from(x.size()).unwrap();
    let ch = (h as f64 * CUTOUT_RATIO + 0.5) as i64;
    let cw = (w as f64 * CUTOUT_RATIO + 0.5) as i64;
    let mut mask = vec![1.0f64; (b * h * w) as usize];
    for n in 0..b {
        let ox = r.gen_range(0..h + (1 - ch % 2));
        let oy = r.gen_range(0..w + (1 - cw % 2));
        let (x0, x1) = ((ox - ch / 2).clamp(0, h), (ox - ch / 2 + ch).clamp(0, h));
        let (y0, y1) = ((oy - cw / 2).clamp(0, w), (oy - cw / 2 + cw).clamp(0, w));
        for i in x0..x1 {
            for j in y0..y1 {
                mask[(n * h * w + i * w + j) as usize] = 0.0;
            }
        }
    }
    let mask = Tensor::from_slice(&mask).view([b, 1, h, w]).to_kind(x.kind());
    x * mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn batch(seed: u64) -> Tensor {
        rng::uniform(&mut rng::rng(seed), &[3, 2, 8, 8], 0.0, 1.0, Kind::Double)
    }

    #[test]
    fn empty_policy_is_identity() {
        let x = batch(1);
        assert!(diff_augment(&x, &[], 5).unwrap().equal(&x));
    }

    #[test]
    fn unknown_op_is_config_error() {
        let x = batch(1);
        assert!(matches!(diff_augment_named(&x, &["color", "blur"], 0), Err(Error::Config(_))));
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let x = batch(2);
        let all = [AugOp::Color, AugOp::Translation, AugOp::Cutout];
        let a = diff_augment(&x, &all, 11).unwrap();
        let b = diff_augment(&x, &all, 11).unwrap();
        assert!(a.equal(&b));
        let c = diff_augment(&x, &all, 12).unwrap();
        assert!(!a.equal(&c));
        assert_eq!(a.size(), x.size());
    }

    #[test]
    fn translation_moves_pixels_exactly() {
        // a single bright pixel must land somewhere within the shift window
        let x = Tensor::zeros([1, 1, 16, 16], (Kind::Double, tch::Device::Cpu));
        let _ = x.get(0).get(0).get(8).get(8).fill_(1.0);
        let y = diff_augment(&x, &[AugOp::Translation], 3).unwrap();
        assert_eq!(y.sum(Kind::Double).double_value(&[]), 1.0);
        let pos = y.view([-1]).argmax(0, false).int64_value(&[]);
        let (i, j) = (pos / 16, pos % 16);
        assert!((i - 8).abs() <= 2 && (j - 8).abs() <= 2);
    }

    #[test]
    fn translation_gradient_matches_finite_differences() {
        let x = batch(4).set_requires_grad(true);
        let y = diff_augment(&x, &[AugOp::Translation], 9).unwrap();
        let weights = rng::uniform(&mut rng::rng(5), &y.size(), -1.0, 1.0, Kind::Double);
        let loss = (&y * &weights).sum(Kind::Double);
        let g = tch::Tensor::run_backward(&[loss], &[&x], false, false).remove(0);
        assert!(g.norm().double_value(&[]) > 0.0);
        let eps = 1e-6;
        let f = |xv: &Tensor| {
            (diff_augment(xv, &[AugOp::Translation], 9).unwrap() * &weights)
                .sum(Kind::Double)
                .double_value(&[])
        };
        let base = x.detach();
        for flat in [0i64, 37, 100, 311] {
            let plus = base.copy();
            let minus = base.copy();
            let _ = plus.view([-1]).get(flat).f_add_(&Tensor::from(eps)).unwrap();
            let _ = minus.view([-1]).get(flat).f_sub_(&Tensor::from(eps)).unwrap();
            let fd = (f(&plus) - f(&minus)) / (2.0 * eps);
            let an = g.view([-1]).double_value(&[flat]);
            assert!((fd - an).abs() <= 1e-4 * an.abs().max(1.0), "{fd} vs {an}");
        }
    }

    fn policies() -> Vec<Vec<AugOp>> {
        let ops = [AugOp::Color, AugOp::Translation, AugOp::Cutout];
        (1u32..8)
            .map(|m| ops.iter().enumerate().filter(|(i, _)| m & (1 << i) != 0).map(|(_, o)| *o).collect())
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn every_nonempty_policy_has_input_gradient(p in 0usize..7, seed in 0u64..1000) {
            let policy = &policies()[p];
            let x = batch(seed).set_requires_grad(true);
            let y = diff_augment(&x, policy, seed).unwrap();
            let g = Tensor::run_backward(&[y.square().sum(Kind::Double)], &[&x], false, false).remove(0);
            prop_assert!(g.norm().double_value(&[]) > 0.0);
        }
    }
}
