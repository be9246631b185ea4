use serde::{Deserialize, Serialize};
use tch::{nn, nn::Module, Device, Kind, Tensor};

use super::init;
use super::layers::{BasicBlock, BatchMoments, Bn, ConvBnRelu, DwSeparable, Forward};
use crate::error::{Error, Result};
use crate::guidance::Normalization;

/// Registered classifier architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchId {
    Lenet5,
    /// LeNet-5 with every layer width halved; the desk-scale student.
    Lenet5Half,
    Cnn3,
    Resnet8,
    Resnet20,
    MobileSmall,
    /// Two-layer perceptron without batch norm.
    Mlp,
}

pub const REGISTRY: &[ArchId] = &[
    ArchId::Lenet5,
    ArchId::Lenet5Half,
    ArchId::Cnn3,
    ArchId::Resnet8,
    ArchId::Resnet20,
    ArchId::MobileSmall,
    ArchId::Mlp,
];

impl ArchId {
    pub fn parse(s: &str) -> Result<Self> {
        REGISTRY
            .iter()
            .copied()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::UnknownArch {
                got: s.to_string(),
                valid: REGISTRY.iter().map(|a| a.as_str()).collect::<Vec<_>>().join(", "),
            })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ArchId::Lenet5 => "lenet5",
            ArchId::Lenet5Half => "lenet5_half",
            ArchId::Cnn3 => "cnn3",
            ArchId::Resnet8 => "resnet8",
            ArchId::Resnet20 => "resnet20",
            ArchId::MobileSmall => "mobile_small",
            ArchId::Mlp => "mlp",
        }
    }

    /// Penultimate feature width.
    pub fn feat_dim(self) -> i64 {
        match self {
            ArchId::Lenet5 => 84,
            ArchId::Lenet5Half => 42,
            ArchId::Cnn3 => 128,
            ArchId::Resnet8 | ArchId::Resnet20 => 64,
            ArchId::MobileSmall => 128,
            ArchId::Mlp => 128,
        }
    }

    /// Smallest square input side the architecture accepts.
    fn min_side(self) -> i64 {
        match self {
            ArchId::Lenet5 | ArchId::Lenet5Half => 12,
            ArchId::Cnn3 | ArchId::MobileSmall => 8,
            ArchId::Resnet8 | ArchId::Resnet20 => 4,
            ArchId::Mlp => 1,
        }
    }
}

impl std::fmt::Display for ArchId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub arch_id: ArchId,
    pub num_classes: i64,
    /// `(channels, height, width)`
    pub input_shape: [i64; 3],
}

impl ClassifierSpec {
    pub fn new(arch_id: ArchId, num_classes: i64, input_shape: [i64; 3]) -> Self {
        ClassifierSpec {
            arch_id,
            num_classes,
            input_shape,
        }
    }
}

trait Backbone: std::fmt::Debug + Send {
    fn features(&self, x: &Tensor, f: &mut Forward) -> Tensor;
    fn bn_layers(&self) -> Vec<&nn::BatchNorm>;
}

#[derive(Debug)]
struct LeNet {
    c1: ConvBnRelu,
    c2: nn::Conv2D,
    bn2: Bn,
    fc1: nn::Linear,
    bn3: Bn,
    fc2: nn::Linear,
}

impl LeNet {
    fn new(p: &nn::Path, in_c: i64, side: i64, half: bool) -> Self {
        let (w1, w2, f1, f2) = if half { (3, 8, 60, 42) } else { (6, 16, 120, 84) };
        let s = (side / 2 - 4) / 2;
        LeNet {
            c1: ConvBnRelu::new(&(p / "c1"), in_c, w1, 5, 1, 1),
            c2: nn::conv2d(p / "c2", w1, w2, 5, Default::default()),
            bn2: Bn::new2d(p / "bn2", w2),
            fc1: nn::linear(p / "fc1", w2 * s * s, f1, Default::default()),
            bn3: Bn::new1d(p / "bn3", f1),
            fc2: nn::linear(p / "fc2", f1, f2, Default::default()),
        }
    }
}

impl Backbone for LeNet {
    fn features(&self, x: &Tensor, f: &mut Forward) -> Tensor {
        let h = self.c1.forward(x, f).max_pool2d_default(2);
        let h = self.bn2.forward(&h.apply(&self.c2), f).relu().max_pool2d_default(2);
        let h = h.flatten(1, -1).apply(&self.fc1);
        let h = self.bn3.forward(&h, f).relu();
        h.apply(&self.fc2).relu()
    }

    fn bn_layers(&self) -> Vec<&nn::BatchNorm> {
        let mut v = self.c1.bn_layers();
        v.push(&self.bn2.inner);
        v.push(&self.bn3.inner);
        v
    }
}

/// Three conv blocks (conv-BN-ReLU-avgpool) of width 128, global pooling.
#[derive(Debug)]
struct Cnn3 {
    blocks: Vec<ConvBnRelu>,
}

impl Backbone for Cnn3 {
    fn features(&self, x: &Tensor, f: &mut Forward) -> Tensor {
        let mut h = x.shallow_clone();
        for b in &self.blocks {
            h = b.forward(&h, f).avg_pool2d_default(2);
        }
        h.mean_dim([2i64, 3].as_slice(), false, None)
    }

    fn bn_layers(&self) -> Vec<&nn::BatchNorm> {
        self.blocks.iter().flat_map(|b| b.bn_layers()).collect()
    }
}

#[derive(Debug)]
struct ResNet {
    stem: ConvBnRelu,
    blocks: Vec<BasicBlock>,
}

impl ResNet {
    fn new(p: &nn::Path, in_c: i64, per_stage: usize) -> Self {
        let mut blocks = Vec::new();
        let mut c_in = 16;
        for (stage, &c) in [16i64, 32, 64].iter().enumerate() {
            for b in 0..per_stage {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(&(p / format!("s{stage}b{b}")), c_in, c, stride));
                c_in = c;
            }
        }
        ResNet {
            stem: ConvBnRelu::new(&(p / "stem"), in_c, 16, 3, 1, 1),
            blocks,
        }
    }
}

impl Backbone for ResNet {
    fn features(&self, x: &Tensor, f: &mut Forward) -> Tensor {
        let mut h = self.stem.forward(x, f);
        for b in &self.blocks {
            h = b.forward(&h, f);
        }
        h.mean_dim([2i64, 3].as_slice(), false, None)
    }

    fn bn_layers(&self) -> Vec<&nn::BatchNorm> {
        let mut v = self.stem.bn_layers();
        for b in &self.blocks {
            v.extend(b.bn_layers());
        }
        v
    }
}

#[derive(Debug)]
struct MobileSmall {
    stem: ConvBnRelu,
    blocks: Vec<DwSeparable>,
}

impl MobileSmall {
    fn new(p: &nn::Path, in_c: i64) -> Self {
        let cfg = [(16i64, 32i64, 2i64), (32, 64, 2), (64, 64, 1), (64, 128, 2)];
        MobileSmall {
            stem: ConvBnRelu::new(&(p / "stem"), in_c, 16, 3, 1, 1),
            blocks: cfg
                .iter()
                .enumerate()
                .map(|(i, &(a, b, s))| DwSeparable::new(&(p / format!("dw{i}")), a, b, s))
                .collect(),
        }
    }
}

impl Backbone for MobileSmall {
    fn features(&self, x: &Tensor, f: &mut Forward) -> Tensor {
        let mut h = self.stem.forward(x, f);
        for b in &self.blocks {
            h = b.forward(&h, f);
        }
        h.mean_dim([2i64, 3].as_slice(), false, None)
    }

    fn bn_layers(&self) -> Vec<&nn::BatchNorm> {
        let mut v = self.stem.bn_layers();
        for b in &self.blocks {
            v.extend(b.bn_layers());
        }
        v
    }
}

#[derive(Debug)]
struct Mlp {
    fc1: nn::Linear,
    fc2: nn::Linear,
}

impl Backbone for Mlp {
    fn features(&self, x: &Tensor, _f: &mut Forward) -> Tensor {
        x.flatten(1, -1).apply(&self.fc1).relu().apply(&self.fc2).relu()
    }

    fn bn_layers(&self) -> Vec<&nn::BatchNorm> {
        Vec::new()
    }
}

/// Running statistics of every batch-norm layer, in model order.
#[derive(Debug)]
pub struct BNStatistics {
    pub layers: Vec<BatchMoments>,
}

/// A classifier with a penultimate-feature hook: `logits = head(features)`.
///
/// Inputs are images in `[0, 1]`; the per-channel normalization of the
/// training data is applied inside the model.
#[derive(Debug)]
pub struct Classifier {
    spec: ClassifierSpec,
    vs: nn::VarStore,
    net: Box<dyn Backbone>,
    head: nn::Linear,
    normalization: Normalization,
}

/// Builds and initializes a registered classifier.
pub fn build_classifier(spec: &ClassifierSpec, seed: u64) -> Result<Classifier> {
    let [c, h, w] = spec.input_shape;
    if spec.num_classes < 1 {
        return Err(Error::Config(format!("num_classes must be positive, got {}", spec.num_classes)));
    }
    let arch = spec.arch_id;
    if c < 1 || h != w || h < arch.min_side() {
        return Err(Error::Config(format!(
            "input shape {:?} not supported by {arch} (square, side >= {})",
            spec.input_shape,
            arch.min_side()
        )));
    }
    let vs = nn::VarStore::new(Device::Cpu);
    let root = vs.root();
    let p = &root / "net";
    let net: Box<dyn Backbone> = match arch {
        ArchId::Lenet5 => Box::new(LeNet::new(&p, c, h, false)),
        ArchId::Lenet5Half => Box::new(LeNet::new(&p, c, h, true)),
        ArchId::Cnn3 => Box::new(Cnn3 {
            blocks: (0..3)
                .map(|i| ConvBnRelu::new(&(&p / format!("b{i}")), if i == 0 { c } else { 128 }, 128, 3, 1, 1))
                .collect(),
        }),
        ArchId::Resnet8 => Box::new(ResNet::new(&p, c, 1)),
        ArchId::Resnet20 => Box::new(ResNet::new(&p, c, 3)),
        ArchId::MobileSmall => Box::new(MobileSmall::new(&p, c)),
        ArchId::Mlp => Box::new(Mlp {
            fc1: nn::linear(&p / "fc1", c * h * w, 256, Default::default()),
            fc2: nn::linear(&p / "fc2", 256, 128, Default::default()),
        }),
    };
    let head = nn::linear(&root / "head", arch.feat_dim(), spec.num_classes, Default::default());
    init::reinit(&vs, seed);
    Ok(Classifier {
        spec: spec.clone(),
        vs,
        net,
        head,
        normalization: Normalization::identity(c as usize),
    })
}

impl Classifier {
    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    pub fn feat_dim(&self) -> i64 {
        self.spec.arch_id.feat_dim()
    }

    pub fn num_classes(&self) -> i64 {
        self.spec.num_classes
    }

    pub fn var_store(&self) -> &nn::VarStore {
        &self.vs
    }

    pub fn var_store_mut(&mut self) -> &mut nn::VarStore {
        &mut self.vs
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    pub fn set_normalization(&mut self, n: Normalization) -> Result<()> {
        if n.mean.len() as i64 != self.spec.input_shape[0] || n.std.len() != n.mean.len() {
            return Err(Error::Dimension(format!(
                "normalization for {} channels given to a {}-channel model",
                n.mean.len(),
                self.spec.input_shape[0]
            )));
        }
        self.normalization = n;
        Ok(())
    }

    pub fn freeze(&mut self) {
        self.vs.freeze();
    }

    pub fn unfreeze(&mut self) {
        self.vs.unfreeze();
    }

    pub fn param_count(&self) -> i64 {
        self.vs.trainable_variables().iter().map(|t| t.numel() as i64).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.size();
        if s.len() != 4 || s[1..] != self.spec.input_shape[..] {
            return Err(Error::Dimension(format!(
                "expected (B, {}, {}, {}) input, got {:?}",
                self.spec.input_shape[0], self.spec.input_shape[1], self.spec.input_shape[2], s
            )));
        }
        Ok(())
    }

    fn normalize(&self, x: &Tensor) -> Tensor {
        let c = self.spec.input_shape[0];
        let kind = x.kind();
        let mean = Tensor::from_slice(&self.normalization.mean).to_kind(kind).view([1, c, 1, 1]);
        let std = Tensor::from_slice(&self.normalization.std).to_kind(kind).view([1, c, 1, 1]);
        (x - mean) / std
    }

    /// Penultimate features under the given context.
    pub fn features_with(&self, x: &Tensor, f: &mut Forward) -> Result<Tensor> {
        self.check_input(x)?;
        Ok(self.net.features(&self.normalize(x), f))
    }

    /// `(features, logits)` in one pass.
    pub fn forward_with(&self, x: &Tensor, f: &mut Forward) -> Result<(Tensor, Tensor)> {
        let feats = self.features_with(x, f)?;
        let logits = self.head(&feats);
        Ok((feats, logits))
    }

    pub fn head(&self, features: &Tensor) -> Tensor {
        self.head.forward(features)
    }

    pub fn logits_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut f = Forward { train, tap: None };
        Ok(self.forward_with(x, &mut f)?.1)
    }

    /// Eval-mode logits.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.logits_t(x, false)
    }

    /// Eval-mode penultimate features, shape `(B, d_feat)`.
    pub fn penultimate_features(&self, x: &Tensor) -> Result<Tensor> {
        self.features_with(x, &mut Forward::eval())
    }

    /// Eval-mode logits over a large tensor, chunked, without gradients.
    pub fn predict(&self, x: &Tensor, chunk: i64) -> Result<Tensor> {
        self.check_input(x)?;
        let n = x.size()[0];
        let mut outs = Vec::new();
        tch::no_grad(|| -> Result<()> {
            let mut start = 0;
            while start < n {
                let len = chunk.min(n - start);
                outs.push(self.logits(&x.narrow(0, start, len))?);
                start += len;
            }
            Ok(())
        })?;
        if outs.is_empty() {
            return Ok(Tensor::zeros([0, self.spec.num_classes], (Kind::Float, Device::Cpu)));
        }
        Ok(Tensor::cat(&outs, 0))
    }

    /// Eval-mode penultimate features over a large tensor, chunked.
    pub fn predict_features(&self, x: &Tensor, chunk: i64) -> Result<Tensor> {
        self.check_input(x)?;
        let n = x.size()[0];
        let mut outs = Vec::new();
        tch::no_grad(|| -> Result<()> {
            let mut start = 0;
            while start < n {
                let len = chunk.min(n - start);
                outs.push(self.penultimate_features(&x.narrow(0, start, len))?);
                start += len;
            }
            Ok(())
        })?;
        if outs.is_empty() {
            return Ok(Tensor::zeros([0, self.feat_dim()], (Kind::Float, Device::Cpu)));
        }
        Ok(Tensor::cat(&outs, 0))
    }

    /// Running statistics of the batch-norm layers in forward order.
    pub fn bn_statistics(&self) -> Result<BNStatistics> {
        let layers: Vec<BatchMoments> = self
            .net
            .bn_layers()
            .into_iter()
            .map(|bn| BatchMoments {
                mean: bn.running_mean.detach().copy(),
                var: bn.running_var.detach().copy(),
            })
            .collect();
        if layers.is_empty() {
            return Err(Error::NoBatchNorm);
        }
        Ok(BNStatistics { layers })
    }

    pub fn num_bn_layers(&self) -> usize {
        self.net.bn_layers().len()
    }

    /// Copies every parameter and buffer from `other` (same architecture).
    pub fn copy_from(&mut self, other: &Classifier) -> Result<()> {
        self.vs.copy(&other.vs)?;
        self.normalization = other.normalization.clone();
        Ok(())
    }

    /// Converts all parameters to double precision (gradient checks).
    pub fn to_double(&mut self) {
        self.vs.double();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(a: ArchId, shape: [i64; 3]) -> ClassifierSpec {
        ClassifierSpec::new(a, 10, shape)
    }

    #[test]
    fn every_arch_honours_shape_contract() {
        for &a in REGISTRY {
            for shape in [[1, 28, 28], [3, 32, 32]] {
                let m = build_classifier(&spec(a, shape), 0).unwrap();
                let x = Tensor::zeros([2, shape[0], shape[1], shape[2]], (Kind::Float, Device::Cpu));
                let (f, l) = m.forward_with(&x, &mut Forward::eval()).unwrap();
                assert_eq!(f.size(), vec![2, a.feat_dim()], "{a}");
                assert_eq!(l.size(), vec![2, 10], "{a}");
            }
        }
    }

    #[test]
    fn unknown_arch_lists_valid_ids() {
        let err = ArchId::parse("vgg99").unwrap_err().to_string();
        assert!(err.contains("lenet5") && err.contains("resnet20"), "{err}");
    }

    #[test]
    fn lenet5_logit_dim() {
        let m = build_classifier(&spec(ArchId::Lenet5, [1, 28, 28]), 1).unwrap();
        let x = Tensor::zeros([1, 1, 28, 28], (Kind::Float, Device::Cpu));
        assert_eq!(m.logits(&x).unwrap().size(), vec![1, 10]);
        assert_eq!(m.penultimate_features(&x).unwrap().size(), vec![1, 84]);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let m = build_classifier(&spec(ArchId::Resnet8, [3, 32, 32]), 1).unwrap();
        let x = Tensor::zeros([1, 1, 28, 28], (Kind::Float, Device::Cpu));
        assert!(matches!(m.logits(&x), Err(Error::Dimension(_))));
    }

    #[test]
    fn penultimate_recomposes_logits() {
        let m = build_classifier(&spec(ArchId::Resnet8, [3, 32, 32]), 3).unwrap();
        let x = crate::rng::uniform(&mut crate::rng::rng(4), &[3, 3, 32, 32], 0.0, 1.0, Kind::Float);
        let feats = m.penultimate_features(&x).unwrap();
        let direct = m.logits(&x).unwrap();
        let recomposed = m.head(&feats);
        let diff = (direct - recomposed).abs().max().double_value(&[]);
        assert!(diff < 1e-5, "{diff}");
    }

    #[test]
    fn eval_is_deterministic() {
        let m = build_classifier(&spec(ArchId::MobileSmall, [3, 32, 32]), 3).unwrap();
        let x = crate::rng::uniform(&mut crate::rng::rng(5), &[2, 3, 32, 32], 0.0, 1.0, Kind::Float);
        let a = m.penultimate_features(&x).unwrap();
        let b = m.penultimate_features(&x).unwrap();
        assert!(a.equal(&b));
    }

    #[test]
    fn fresh_bn_stats_are_unit() {
        let m = build_classifier(&spec(ArchId::Resnet8, [3, 32, 32]), 0).unwrap();
        let stats = m.bn_statistics().unwrap();
        assert_eq!(stats.layers.len(), m.num_bn_layers());
        for l in &stats.layers {
            assert_eq!(l.mean.abs().max().double_value(&[]), 0.0);
            assert_eq!((l.var.shallow_clone() - 1.0).abs().max().double_value(&[]), 0.0);
        }
    }

    #[test]
    fn mlp_has_no_bn() {
        let m = build_classifier(&spec(ArchId::Mlp, [1, 28, 28]), 0).unwrap();
        assert!(matches!(m.bn_statistics(), Err(Error::NoBatchNorm)));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_classifier(&spec(ArchId::Lenet5, [1, 28, 28]), 9).unwrap();
        let b = build_classifier(&spec(ArchId::Lenet5, [1, 28, 28]), 9).unwrap();
        let va = a.var_store().variables();
        let vb = b.var_store().variables();
        for (k, t) in va {
            assert!(t.equal(&vb[&k]), "{k}");
        }
    }
}
