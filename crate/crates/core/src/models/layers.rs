//! Building blocks shared by the classifier zoo. Every block threads a
//! [`Forward`] context so batch-norm inputs can be captured in model order.

use tch::{nn, Tensor};

/// Per-channel batch moments of a batch-norm layer's input.
#[derive(Debug)]
pub struct BatchMoments {
    pub mean: Tensor,
    pub var: Tensor,
}

/// Forward-pass context: train/eval mode plus an optional batch-norm tap.
#[derive(Debug, Default)]
pub struct Forward {
    pub train: bool,
    pub tap: Option<Vec<BatchMoments>>,
}

impl Forward {
    pub fn eval() -> Self {
        Forward { train: false, tap: None }
    }

    pub fn train() -> Self {
        Forward { train: true, tap: None }
    }

    pub fn tapped(train: bool) -> Self {
        Forward {
            train,
            tap: Some(Vec::new()),
        }
    }
}

#[derive(Debug)]
pub struct Bn {
    pub inner: nn::BatchNorm,
}

impl Bn {
    pub fn new2d(p: nn::Path, c: i64) -> Self {
        Bn {
            inner: nn::batch_norm2d(p, c, Default::default()),
        }
    }

    pub fn new1d(p: nn::Path, c: i64) -> Self {
        Bn {
            inner: nn::batch_norm1d(p, c, Default::default()),
        }
    }

    pub fn forward(&self, x: &Tensor, f: &mut Forward) -> Tensor {
        if let Some(tap) = f.tap.as_mut() {
            let dims: Vec<i64> = if x.dim() == 4 { vec![0, 2, 3] } else { vec![0] };
            tap.push(BatchMoments {
                mean: x.mean_dim(dims.as_slice(), false, None),
                var: x.var_dim(dims.as_slice(), false, false),
            });
        }
        x.apply_t(&self.inner, f.train)
    }
}

fn conv(p: nn::Path, i: i64, o: i64, k: i64, stride: i64, groups: i64, bias: bool) -> nn::Conv2D {
    nn::conv2d(
        p,
        i,
        o,
        k,
        nn::ConvConfig {
            stride,
            padding: k / 2,
            groups,
            bias,
            ..Default::default()
        },
    )
}

/// Conv (same padding) → BN → ReLU.
#[derive(Debug)]
pub struct ConvBnRelu {
    conv: nn::Conv2D,
    bn: Bn,
}

impl ConvBnRelu {
    pub fn new(p: &nn::Path, i: i64, o: i64, k: i64, stride: i64, groups: i64) -> Self {
        ConvBnRelu {
            conv: conv(p / "conv", i, o, k, stride, groups, false),
            bn: Bn::new2d(p / "bn", o),
        }
    }

    pub fn forward(&self, x: &Tensor, f: &mut Forward) -> Tensor {
        self.bn.forward(&x.apply(&self.conv), f).relu()
    }

    pub fn bn_layers(&self) -> Vec<&nn::BatchNorm> {
        vec![&self.bn.inner]
    }
}

/// CIFAR-style residual basic block with a projection shortcut when the
/// shape changes.
#[derive(Debug)]
pub struct BasicBlock {
    conv1: nn::Conv2D,
    bn1: Bn,
    conv2: nn::Conv2D,
    bn2: Bn,
    shortcut: Option<(nn::Conv2D, Bn)>,
}

impl BasicBlock {
    pub fn new(p: &nn::Path, i: i64, o: i64, stride: i64) -> Self {
        let shortcut = (stride != 1 || i != o).then(|| {
            (
                conv(p / "sc_conv", i, o, 1, stride, 1, false),
                Bn::new2d(p / "sc_bn", o),
            )
        });
        BasicBlock {
            conv1: conv(p / "conv1", i, o, 3, stride, 1, false),
            bn1: Bn::new2d(p / "bn1", o),
            conv2: conv(p / "conv2", o, o, 3, 1, 1, false),
            bn2: Bn::new2d(p / "bn2", o),
            shortcut,
        }
    }

    pub fn forward(&self, x: &Tensor, f: &mut Forward) -> Tensor {
        let h = self.bn1.forward(&x.apply(&self.conv1), f).relu();
        let h = self.bn2.forward(&h.apply(&self.conv2), f);
        let s = match &self.shortcut {
            Some((c, bn)) => bn.forward(&x.apply(c), f),
            None => x.shallow_clone(),
        };
        (h + s).relu()
    }

    pub fn bn_layers(&self) -> Vec<&nn::BatchNorm> {
        let mut v = vec![&self.bn1.inner, &self.bn2.inner];
        if let Some((_, bn)) = &self.shortcut {
            v.push(&bn.inner);
        }
        v
    }
}

/// Depthwise 3×3 → BN → ReLU → pointwise 1×1 → BN → ReLU.
#[derive(Debug)]
pub struct DwSeparable {
    dw: ConvBnRelu,
    pw: ConvBnRelu,
}

impl DwSeparable {
    pub fn new(p: &nn::Path, i: i64, o: i64, stride: i64) -> Self {
        DwSeparable {
            dw: ConvBnRelu::new(&(p / "dw"), i, i, 3, stride, i),
            pw: ConvBnRelu::new(&(p / "pw"), i, o, 1, 1, 1),
        }
    }

    pub fn forward(&self, x: &Tensor, f: &mut Forward) -> Tensor {
        self.pw.forward(&self.dw.forward(x, f), f)
    }

    pub fn bn_layers(&self) -> Vec<&nn::BatchNorm> {
        let mut v = self.dw.bn_layers();
        v.extend(self.pw.bn_layers());
        v
    }
}
