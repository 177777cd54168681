//! Encoder backbones assembled from the layers: a three-block CNN for small
//! grayscale inputs, and an 18-layer residual network for natural images.
//! Both end in global average pooling, a linear head to dimension d, and
//! row-wise L2 normalization onto the unit sphere.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use super::layers::{Conv2d, GlobalAvgPool, GroupNorm2d, L2NormRows, Linear, MaxPool2d, Relu};
use super::{FeatureMap, Network, Slot};
use crate::error::{Error, Result};

/// conv 3x3 / groupnorm / (relu) / maxpool 2x2.
///
/// The final block of the small encoder omits the ReLU: rectified
/// activations have a positive spatial mean in every channel, which after
/// global pooling gives all samples one shared dominant direction and
/// nearly-collapsed unit features at initialization. Ending on the
/// zero-mean normalization output keeps the pooled features spread.
pub struct ConvBlock {
    conv: Conv2d,
    bn: GroupNorm2d,
    relu: Option<Relu>,
    pool: MaxPool2d,
}

impl ConvBlock {
    fn new(c_in: usize, c_out: usize, with_relu: bool, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv2d::new(c_in, c_out, 3, 1, 1, rng),
            bn: GroupNorm2d::new(c_out),
            relu: with_relu.then(Relu::new),
            pool: MaxPool2d::new(2, 2, 0),
        }
    }

    fn forward_train(&mut self, x: FeatureMap) -> Result<FeatureMap> {
        let x = self.conv.forward_train(x)?;
        let mut x = self.bn.forward_train(x)?;
        if let Some(relu) = &mut self.relu {
            x = relu.forward_train(x);
        }
        Ok(self.pool.forward_train(x))
    }

    fn forward_eval(&self, x: &FeatureMap) -> Result<FeatureMap> {
        let x = self.conv.forward_eval(x)?;
        let mut x = self.bn.forward_eval(&x)?;
        if let Some(relu) = &self.relu {
            x = relu.forward_eval(&x);
        }
        Ok(self.pool.forward_eval(&x))
    }

    fn backward(&mut self, dy: &FeatureMap) -> Result<FeatureMap> {
        let mut dy = self.pool.backward(dy)?;
        if let Some(relu) = &mut self.relu {
            dy = relu.backward(&dy)?;
        }
        let dy = self.bn.backward(&dy)?;
        self.conv.backward(&dy)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        self.conv.visit(&format!("{prefix}.conv"), f);
        self.bn.visit(&format!("{prefix}.bn"), f);
    }
}

/// Three conv blocks, global pooling, and a linear head; accepts 1-channel
/// 28x28 inputs (any spatial size >= 8 works).
pub struct SmallConvNet {
    b1: ConvBlock,
    b2: ConvBlock,
    b3: ConvBlock,
    gap: GlobalAvgPool,
    head: Linear,
    l2: L2NormRows,
    dim: usize,
}

pub const SMALL_CONV_CHANNELS: [usize; 3] = [32, 64, 128];

impl SmallConvNet {
    pub fn new(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let [c1, c2, c3] = SMALL_CONV_CHANNELS;
        Self {
            b1: ConvBlock::new(1, c1, true, rng),
            b2: ConvBlock::new(c1, c2, true, rng),
            b3: ConvBlock::new(c2, c3, false, rng),
            gap: GlobalAvgPool::new(),
            head: Linear::new(c3, dim, rng),
            l2: L2NormRows::new(),
            dim,
        }
    }
}

/// (C, N) pooled map -> (N, C) feature matrix.
fn pooled_to_rows(x: &FeatureMap) -> Array2<f32> {
    x.data.t().to_owned()
}

fn rows_to_pooled(rows: &Array2<f32>, n: usize) -> FeatureMap {
    FeatureMap {
        data: rows.t().to_owned(),
        n,
        h: 1,
        w: 1,
    }
}

impl Network for SmallConvNet {
    fn forward_train(&mut self, x: FeatureMap) -> Result<Array2<f32>> {
        let n = x.n;
        let x = self.b1.forward_train(x)?;
        let x = self.b2.forward_train(x)?;
        let x = self.b3.forward_train(x)?;
        let x = self.gap.forward_train(x);
        let rows = pooled_to_rows(&x);
        debug_assert_eq!(rows.nrows(), n);
        let rows = self.head.forward_train(rows)?;
        self.l2.forward_train(rows)
    }

    fn forward_eval(&self, x: &FeatureMap) -> Result<Array2<f32>> {
        let x = self.b1.forward_eval(x)?;
        let x = self.b2.forward_eval(&x)?;
        let x = self.b3.forward_eval(&x)?;
        let x = self.gap.forward_eval(&x);
        let rows = pooled_to_rows(&x);
        let rows = self.head.forward_eval(&rows)?;
        self.l2.forward_eval(&rows)
    }

    fn backward(&mut self, grad_output: &Array2<f32>) -> Result<()> {
        let n = grad_output.nrows();
        let dy = self.l2.backward(grad_output)?;
        let dy = self.head.backward(&dy)?;
        let dy = rows_to_pooled(&dy, n);
        let dy = self.gap.backward(&dy)?;
        let dy = self.b3.backward(&dy)?;
        let dy = self.b2.backward(&dy)?;
        let _ = self.b1.backward(&dy)?;
        Ok(())
    }

    fn visit(&mut self, f: &mut dyn FnMut(&str, Slot<'_>)) {
        self.b1.visit("b1", f);
        self.b2.visit("b2", f);
        self.b3.visit("b3", f);
        self.head.visit("head", f);
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        (1, 28, 28)
    }

    fn output_dim(&self) -> usize {
        self.dim
    }
}

/// Two 3x3 convolutions with a residual connection; the first convolution
/// may downsample, in which case the identity path gets a strided 1x1
/// projection.
pub struct BasicBlock {
    conv1: Conv2d,
    bn1: GroupNorm2d,
    relu1: Relu,
    conv2: Conv2d,
    bn2: GroupNorm2d,
    down: Option<(Conv2d, GroupNorm2d)>,
    relu2: Relu,
}

impl BasicBlock {
    fn new(c_in: usize, c_out: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let down = if stride != 1 || c_in != c_out {
            Some((
                Conv2d::new(c_in, c_out, 1, stride, 0, rng),
                GroupNorm2d::new(c_out),
            ))
        } else {
            None
        };
        Self {
            conv1: Conv2d::new(c_in, c_out, 3, stride, 1, rng),
            bn1: GroupNorm2d::new(c_out),
            relu1: Relu::new(),
            conv2: Conv2d::new(c_out, c_out, 3, 1, 1, rng),
            bn2: GroupNorm2d::new(c_out),
            down,
            relu2: Relu::new(),
        }
    }

    fn forward_train(&mut self, x: FeatureMap) -> Result<FeatureMap> {
        let skip_input = x.clone();
        let out = self.conv1.forward_train(x)?;
        let out = self.bn1.forward_train(out)?;
        let out = self.relu1.forward_train(out);
        let out = self.conv2.forward_train(out)?;
        let mut out = self.bn2.forward_train(out)?;
        let skip = match &mut self.down {
            Some((conv, bn)) => {
                let s = conv.forward_train(skip_input)?;
                bn.forward_train(s)?
            }
            None => skip_input,
        };
        out.data += &skip.data;
        Ok(self.relu2.forward_train(out))
    }

    fn forward_eval(&self, x: &FeatureMap) -> Result<FeatureMap> {
        let out = self.conv1.forward_eval(x)?;
        let out = self.bn1.forward_eval(&out)?;
        let out = self.relu1.forward_eval(&out);
        let out = self.conv2.forward_eval(&out)?;
        let mut out = self.bn2.forward_eval(&out)?;
        let skip = match &self.down {
            Some((conv, bn)) => {
                let s = conv.forward_eval(x)?;
                bn.forward_eval(&s)?
            }
            None => x.clone(),
        };
        out.data += &skip.data;
        Ok(self.relu2.forward_eval(&out))
    }

    fn backward(&mut self, dy: &FeatureMap) -> Result<FeatureMap> {
        let dsum = self.relu2.backward(dy)?;
        let d_main = self.bn2.backward(&dsum)?;
        let d_main = self.conv2.backward(&d_main)?;
        let d_main = self.relu1.backward(&d_main)?;
        let d_main = self.bn1.backward(&d_main)?;
        let mut dx = self.conv1.backward(&d_main)?;
        let d_skip = match &mut self.down {
            Some((conv, bn)) => {
                let d = bn.backward(&dsum)?;
                conv.backward(&d)?
            }
            None => dsum,
        };
        dx.data += &d_skip.data;
        Ok(dx)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.bn1.visit(&format!("{prefix}.bn1"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
        self.bn2.visit(&format!("{prefix}.bn2"), f);
        if let Some((conv, bn)) = &mut self.down {
            conv.visit(&format!("{prefix}.down.conv"), f);
            bn.visit(&format!("{prefix}.down.bn"), f);
        }
    }
}

/// The standard 18-layer residual network with its classifier replaced by a
/// linear head to dimension d; accepts 3-channel 224x224 inputs.
pub struct ResNet18 {
    conv1: Conv2d,
    bn1: GroupNorm2d,
    relu: Relu,
    pool: MaxPool2d,
    blocks: Vec<BasicBlock>,
    gap: GlobalAvgPool,
    head: Linear,
    l2: L2NormRows,
    dim: usize,
}

impl ResNet18 {
    pub fn new(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut blocks = Vec::with_capacity(8);
        let stage_channels = [64usize, 128, 256, 512];
        let mut c_in = 64usize;
        for (si, &c_out) in stage_channels.iter().enumerate() {
            for bi in 0..2 {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(c_in, c_out, stride, rng));
                c_in = c_out;
            }
        }
        Self {
            conv1: Conv2d::new(3, 64, 7, 2, 3, rng),
            bn1: GroupNorm2d::new(64),
            relu: Relu::new(),
            pool: MaxPool2d::new(3, 2, 1),
            blocks,
            gap: GlobalAvgPool::new(),
            head: Linear::new(512, dim, rng),
            l2: L2NormRows::new(),
            dim,
        }
    }
}

impl Network for ResNet18 {
    fn forward_train(&mut self, x: FeatureMap) -> Result<Array2<f32>> {
        let x = self.conv1.forward_train(x)?;
        let x = self.bn1.forward_train(x)?;
        let x = self.relu.forward_train(x);
        let mut x = self.pool.forward_train(x);
        for block in &mut self.blocks {
            x = block.forward_train(x)?;
        }
        let x = self.gap.forward_train(x);
        let rows = pooled_to_rows(&x);
        let rows = self.head.forward_train(rows)?;
        self.l2.forward_train(rows)
    }

    fn forward_eval(&self, x: &FeatureMap) -> Result<Array2<f32>> {
        let x = self.conv1.forward_eval(x)?;
        let x = self.bn1.forward_eval(&x)?;
        let x = self.relu.forward_eval(&x);
        let mut x = self.pool.forward_eval(&x);
        for block in &self.blocks {
            x = block.forward_eval(&x)?;
        }
        let x = self.gap.forward_eval(&x);
        let rows = pooled_to_rows(&x);
        let rows = self.head.forward_eval(&rows)?;
        self.l2.forward_eval(&rows)
    }

    fn backward(&mut self, grad_output: &Array2<f32>) -> Result<()> {
        let n = grad_output.nrows();
        let dy = self.l2.backward(grad_output)?;
        let dy = self.head.backward(&dy)?;
        let dy = rows_to_pooled(&dy, n);
        let mut dy = self.gap.backward(&dy)?;
        for block in self.blocks.iter_mut().rev() {
            dy = block.backward(&dy)?;
        }
        let dy = self.pool.backward(&dy)?;
        let dy = self.relu.backward(&dy)?;
        let dy = self.bn1.backward(&dy)?;
        let _ = self.conv1.backward(&dy)?;
        Ok(())
    }

    fn visit(&mut self, f: &mut dyn FnMut(&str, Slot<'_>)) {
        self.conv1.visit("conv1", f);
        self.bn1.visit("bn1", f);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit(&format!("block{i}"), f);
        }
        self.head.visit("head", f);
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        (3, 224, 224)
    }

    fn output_dim(&self) -> usize {
        self.dim
    }
}

/// Checks a feature map against a network's expected input layout.
pub(crate) fn check_input(net: &dyn Network, x: &FeatureMap) -> Result<()> {
    let (c, h, w) = net.input_shape();
    if x.channels() != c || x.h != h || x.w != w {
        return Err(Error::ShapeMismatch(format!(
            "network expects {c}x{h}x{w} inputs, got {}x{}x{}",
            x.channels(),
            x.h,
            x.w
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn random_input(c: usize, n: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap {
            data: Array2::from_shape_fn((c, n * h * w), |_| rng.gen_range(0.0..1.0f32)),
            n,
            h,
            w,
        }
    }

    #[test]
    fn small_conv_outputs_unit_rows() {
        let mut net = SmallConvNet::new(16, &mut ChaCha8Rng::seed_from_u64(0));
        let x = random_input(1, 5, 28, 28, 1);
        let y = net.forward_train(x.clone()).unwrap();
        assert_eq!(y.dim(), (5, 16));
        for row in y.rows() {
            let norm: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() < 1e-5);
        }
        let ye = net.forward_eval(&x).unwrap();
        assert_eq!(ye.dim(), (5, 16));
    }

    #[test]
    fn small_conv_eval_is_deterministic_and_per_sample() {
        #[allow(unused_mut)]
        let net = SmallConvNet::new(8, &mut ChaCha8Rng::seed_from_u64(2));
        let x = random_input(1, 4, 28, 28, 5);
        let a = net.forward_eval(&x).unwrap();
        let b = net.forward_eval(&x).unwrap();
        assert_eq!(a, b);

        // duplicated sample gives identical rows in eval mode
        let mut dup = FeatureMap::zeros(1, 2, 28, 28);
        for c in 0..1 {
            for i in 0..28 * 28 {
                let v = x.data[[c, i]];
                dup.data[[c, i]] = v;
                dup.data[[c, 28 * 28 + i]] = v;
            }
        }
        let y = net.forward_eval(&dup).unwrap();
        for j in 0..y.ncols() {
            assert_eq!(y[[0, j]], y[[1, j]]);
        }
    }

    #[test]
    fn small_conv_whole_net_directional_gradient() {
        let mut net = SmallConvNet::new(6, &mut ChaCha8Rng::seed_from_u64(7));
        let x = random_input(1, 3, 28, 28, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let probe = Array2::from_shape_fn((3, 6), |_| rng.gen_range(-1.0..1.0f32));

        // analytic: d(probe . y)/d(params), projected on a random direction
        let _ = net.forward_train(x.clone()).unwrap();
        net.backward(&probe).unwrap();
        let mut grads: Vec<f32> = Vec::new();
        net.visit(&mut |_, slot| {
            if let super::super::Slot::Param { grad, .. } = slot {
                grads.extend_from_slice(grad);
            }
        });

        // numeric: central difference along a random parameter direction
        let mut dirs: Vec<f32> = Vec::new();
        {
            let mut r = ChaCha8Rng::seed_from_u64(17);
            net.visit(&mut |_, slot| {
                if let super::super::Slot::Param { values, .. } = slot {
                    for _ in 0..values.len() {
                        dirs.push(r.gen_range(-1.0..1.0));
                    }
                }
            });
        }
        let h = 2e-4f32;
        let shift = |net: &mut SmallConvNet, sign: f32, dirs: &[f32]| {
            let mut k = 0usize;
            net.visit(&mut |_, slot| {
                if let super::super::Slot::Param { values, .. } = slot {
                    for v in values.iter_mut() {
                        *v += sign * h * dirs[k];
                        k += 1;
                    }
                }
            });
        };
        // use train-mode forwards with frozen statistics: batch stats depend
        // only on inputs and parameters, both controlled here
        shift(&mut net, 1.0, &dirs);
        let yp = net.forward_train(x.clone()).unwrap();
        let fp: f32 = yp.iter().zip(probe.iter()).map(|(a, b)| a * b).sum();
        shift(&mut net, -2.0, &dirs);
        let ym = net.forward_train(x.clone()).unwrap();
        let fm: f32 = ym.iter().zip(probe.iter()).map(|(a, b)| a * b).sum();
        shift(&mut net, 1.0, &dirs);

        let numeric = (fp - fm) / (2.0 * h);
        let analytic: f32 = grads.iter().zip(dirs.iter()).map(|(a, b)| a * b).sum();
        // coarse: f32 arithmetic and ReLU/pool kinks limit the agreement of
        // a full-parameter directional difference; per-layer checks are tight
        let denom = numeric.abs().max(analytic.abs()).max(1e-3);
        assert!(
            ((numeric - analytic) / denom).abs() < 8e-2,
            "whole-net gradient mismatch: numeric {numeric} vs analytic {analytic}"
        );
    }

    #[test]
    fn resnet18_shapes_and_unit_rows() {
        let mut net = ResNet18::new(32, &mut ChaCha8Rng::seed_from_u64(1));
        let x = random_input(3, 1, 224, 224, 2);
        let y = net.forward_train(x.clone()).unwrap();
        assert_eq!(y.dim(), (1, 32));
        let norm: f32 = y.row(0).iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
        // backward runs through every block
        let probe = Array2::from_elem((1, 32), 0.5f32);
        net.backward(&probe).unwrap();
        let mut any_nonzero = false;
        net.visit(&mut |_, slot| {
            if let super::super::Slot::Param { grad, .. } = slot {
                if grad.iter().any(|&g| g != 0.0) {
                    any_nonzero = true;
                }
            }
        });
        assert!(any_nonzero, "gradients should reach resnet parameters");
    }

    #[test]
    fn basic_block_residual_path_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut block = BasicBlock::new(4, 8, 2, &mut rng);
        let x = random_input(4, 2, 8, 8, 6);
        let y = block.forward_train(x.clone()).unwrap();
        assert_eq!(y.data.dim(), (8, 2 * 4 * 4));
        let probe = Array2::from_shape_fn(y.data.dim(), |_| rng.gen_range(-1.0..1.0f32));
        let dyf = FeatureMap::new(probe.clone(), 2, 4, 4).unwrap();
        let dx = block.backward(&dyf).unwrap();
        assert_eq!(dx.data.dim(), x.data.dim());

        // directional check through train-mode forward
        let h = 1e-2f32;
        for _ in 0..2 {
            let dir = Array2::from_shape_fn(x.data.dim(), |_| rng.gen_range(-1.0..1.0f32));
            let mut xp = x.clone();
            xp.data = &x.data + &dir.mapv(|v| v * h);
            let mut xm = x.clone();
            xm.data = &x.data - &dir.mapv(|v| v * h);
            let fp: f32 = block
                .forward_train(xp)
                .unwrap()
                .data
                .iter()
                .zip(probe.iter())
                .map(|(a, b)| a * b)
                .sum();
            let fm: f32 = block
                .forward_train(xm)
                .unwrap()
                .data
                .iter()
                .zip(probe.iter())
                .map(|(a, b)| a * b)
                .sum();
            let numeric = (fp - fm) / (2.0 * h);
            let analytic: f32 = dx.data.iter().zip(dir.iter()).map(|(a, b)| a * b).sum();
            let denom = numeric.abs().max(analytic.abs()).max(1e-3);
            assert!(((numeric - analytic) / denom).abs() < 3e-2);
        }
    }
}
