//! Composable network blocks: convolution/batch-norm/linear layers, the
//! residual block, CBAM channel + spatial attention, and the BoT block whose
//! middle convolution is replaced by 4-head self-attention.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::init;
use crate::tensor::{self, PoolMode, Tensor};

/// Visitor callback: (dotted name, tensor, is_buffer). Buffers are state that
/// is persisted but never optimized (batch-norm running statistics).
pub type ParamVisitor<'a> = dyn FnMut(String, &Tensor, bool) + 'a;

pub struct Conv {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    pub fn new(
        rng: &mut ChaCha8Rng,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Conv {
        let fan_in = cin * k * k;
        let weight = Tensor::param(init::kaiming(rng, fan_in, cout * cin * k * k), &[cout, cin, k, k])
            .expect("conv weight shape");
        let bias = bias.then(|| Tensor::param(vec![0.0; cout], &[cout]).expect("conv bias shape"));
        Conv {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        tensor::conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.padding)
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        f(format!("{prefix}.weight"), &self.weight, false);
        if let Some(b) = &self.bias {
            f(format!("{prefix}.bias"), b, false);
        }
    }
}

pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize, bias: bool) -> Linear {
        let weight = Tensor::param(init::kaiming(rng, in_dim, out_dim * in_dim), &[out_dim, in_dim])
            .expect("linear weight shape");
        let bias = bias.then(|| Tensor::param(vec![0.0; out_dim], &[out_dim]).expect("linear bias"));
        Linear { weight, bias }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        tensor::linear(x, &self.weight, self.bias.as_ref())
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        f(format!("{prefix}.weight"), &self.weight, false);
        if let Some(b) = &self.bias {
            f(format!("{prefix}.bias"), b, false);
        }
    }
}

pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(channels: usize) -> BatchNorm {
        BatchNorm {
            gamma: Tensor::param(vec![1.0; channels], &[channels]).expect("bn gamma"),
            beta: Tensor::param(vec![0.0; channels], &[channels]).expect("bn beta"),
            running_mean: Tensor::from_vec(vec![0.0; channels], &[channels]).expect("bn mean"),
            running_var: Tensor::from_vec(vec![1.0; channels], &[channels]).expect("bn var"),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        tensor::batch_norm2d(
            x,
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            training,
            self.momentum,
            self.eps,
        )
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        f(format!("{prefix}.gamma"), &self.gamma, false);
        f(format!("{prefix}.beta"), &self.beta, false);
        f(format!("{prefix}.running_mean"), &self.running_mean, true);
        f(format!("{prefix}.running_var"), &self.running_var, true);
    }
}

/// Shared two-layer MLP over pooled channel descriptors; outputs sigmoid
/// weights of shape [N,C,1,1]. The same MLP serves the average- and
/// max-pooled branches.
pub struct ChannelAttention {
    pub fc1: Linear,
    pub fc2: Linear,
    channels: usize,
}

impl ChannelAttention {
    pub fn new(rng: &mut ChaCha8Rng, channels: usize, reduction: usize) -> ChannelAttention {
        let hidden = (channels / reduction).max(1);
        ChannelAttention {
            fc1: Linear::new(rng, channels, hidden, true),
            fc2: Linear::new(rng, hidden, channels, true),
            channels,
        }
    }

    fn mlp(&self, pooled: &Tensor) -> Result<Tensor> {
        let n = pooled.shape()[0];
        let flat = pooled.reshape(&[n, self.channels])?;
        self.fc2.forward(&self.fc1.forward(&flat)?.relu()?)
    }

    /// sigma(mlp(avg_pool(m)) + mlp(max_pool(m))) reshaped to [N,C,1,1].
    pub fn forward(&self, m: &Tensor) -> Result<Tensor> {
        let n = m.shape()[0];
        let phi_a = self.mlp(&tensor::global_pool(m, PoolMode::Avg)?)?;
        let phi_m = self.mlp(&tensor::global_pool(m, PoolMode::Max)?)?;
        phi_a
            .add(&phi_m)?
            .sigmoid()?
            .reshape(&[n, self.channels, 1, 1])
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        self.fc1.visit(&format!("{prefix}.fc1"), f);
        self.fc2.visit(&format!("{prefix}.fc2"), f);
    }
}

/// 7x7 convolution over the concatenated channel-mean and channel-max maps;
/// outputs sigmoid weights of shape [N,1,H,W].
pub struct SpatialAttention {
    pub conv: Conv,
}

impl SpatialAttention {
    pub fn new(rng: &mut ChaCha8Rng) -> SpatialAttention {
        SpatialAttention {
            conv: Conv::new(rng, 2, 1, 7, 1, 3, true),
        }
    }

    pub fn forward(&self, m: &Tensor) -> Result<Tensor> {
        let desc = tensor::concat_channels(&tensor::channel_mean(m)?, &tensor::channel_max(m)?)?;
        self.conv.forward(&desc)?.sigmoid()
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        self.conv.visit(&format!("{prefix}.conv"), f);
    }
}

/// Channel attention ahead of spatial attention, both applied
/// multiplicatively to the incoming feature map.
pub struct CbamBlock {
    pub channel: ChannelAttention,
    pub spatial: SpatialAttention,
}

impl CbamBlock {
    pub fn new(rng: &mut ChaCha8Rng, channels: usize, reduction: usize) -> CbamBlock {
        CbamBlock {
            channel: ChannelAttention::new(rng, channels, reduction),
            spatial: SpatialAttention::new(rng),
        }
    }

    pub fn forward(&self, m: &Tensor) -> Result<Tensor> {
        let m1 = m.mul_bcast(&self.channel.forward(m)?)?;
        m1.mul_bcast(&self.spatial.forward(&m1)?)
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        self.channel.visit(&format!("{prefix}.channel"), f);
        self.spatial.visit(&format!("{prefix}.spatial"), f);
    }
}

/// Basic residual block: conv-bn-relu-conv-bn (+ CBAM) added to the shortcut,
/// then relu. A 1x1 projection shortcut handles stride or width changes.
pub struct ResidualBlock {
    pub conv1: Conv,
    pub bn1: BatchNorm,
    pub conv2: Conv,
    pub bn2: BatchNorm,
    pub downsample: Option<(Conv, BatchNorm)>,
    pub cbam: Option<CbamBlock>,
    /// Replaces every relu in the block by the identity; only used by the
    /// telescoping-sum check of the linearized regime.
    pub identity_activation: bool,
}

impl ResidualBlock {
    pub fn new(
        rng: &mut ChaCha8Rng,
        cin: usize,
        cout: usize,
        stride: usize,
        cbam: bool,
        reduction: usize,
    ) -> ResidualBlock {
        let downsample = (stride != 1 || cin != cout).then(|| {
            (
                Conv::new(rng, cin, cout, 1, stride, 0, false),
                BatchNorm::new(cout),
            )
        });
        ResidualBlock {
            conv1: Conv::new(rng, cin, cout, 3, stride, 1, false),
            bn1: BatchNorm::new(cout),
            conv2: Conv::new(rng, cout, cout, 3, 1, 1, false),
            bn2: BatchNorm::new(cout),
            downsample,
            cbam: cbam.then(|| CbamBlock::new(rng, cout, reduction)),
            identity_activation: false,
        }
    }

    fn act(&self, x: &Tensor) -> Result<Tensor> {
        if self.identity_activation {
            Ok(x.clone())
        } else {
            x.relu()
        }
    }

    /// The residual mapping f(x, w): conv-bn-act-conv-bn, then CBAM if attached.
    pub fn branch(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?, training)?;
        let y = self.bn2.forward(&self.conv2.forward(&self.act(&y)?)?, training)?;
        match &self.cbam {
            Some(cbam) => cbam.forward(&y),
            None => Ok(y),
        }
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        let branch = self.branch(x, training)?;
        let shortcut = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, training)?,
            None => x.clone(),
        };
        self.act(&shortcut.add(&branch)?)
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.bn1.visit(&format!("{prefix}.bn1"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
        self.bn2.visit(&format!("{prefix}.bn2"), f);
        if let Some((conv, bn)) = &self.downsample {
            conv.visit(&format!("{prefix}.downsample.conv"), f);
            bn.visit(&format!("{prefix}.downsample.bn"), f);
        }
        if let Some(cbam) = &self.cbam {
            cbam.visit(&format!("{prefix}.cbam"), f);
        }
    }
}

/// BoT block: 1x1 conv in, 4-head self-attention with 2-D relative position
/// embeddings in place of the middle convolution, 1x1 conv out, batch norms,
/// identity shortcut, three relus. Heads are concatenated with no output
/// projection.
pub struct MhsaBlock {
    pub conv_in: Conv,
    pub bn_in: BatchNorm,
    pub query: Conv,
    pub key: Conv,
    pub value: Conv,
    pub pos_row: Tensor,
    pub pos_col: Tensor,
    pub bn_mid: BatchNorm,
    pub conv_out: Conv,
    pub bn_out: BatchNorm,
    pub heads: usize,
    pub scale_logits: bool,
}

impl MhsaBlock {
    pub fn new(
        rng: &mut ChaCha8Rng,
        channels: usize,
        heads: usize,
        h_max: usize,
        w_max: usize,
    ) -> MhsaBlock {
        assert!(heads > 0 && channels % heads == 0, "heads must divide width");
        let dh = channels / heads;
        MhsaBlock {
            conv_in: Conv::new(rng, channels, channels, 1, 1, 0, false),
            bn_in: BatchNorm::new(channels),
            query: Conv::new(rng, channels, channels, 1, 1, 0, false),
            key: Conv::new(rng, channels, channels, 1, 1, 0, false),
            value: Conv::new(rng, channels, channels, 1, 1, 0, false),
            pos_row: Tensor::param(
                init::gaussian(rng, 0.02, (2 * h_max - 1) * dh),
                &[2 * h_max - 1, dh],
            )
            .expect("pos_row shape"),
            pos_col: Tensor::param(
                init::gaussian(rng, 0.02, (2 * w_max - 1) * dh),
                &[2 * w_max - 1, dh],
            )
            .expect("pos_col shape"),
            bn_mid: BatchNorm::new(channels),
            conv_out: Conv::new(rng, channels, channels, 1, 1, 0, false),
            bn_out: BatchNorm::new(channels),
            heads,
            scale_logits: true,
        }
    }

    /// The bare attention over an already-projected feature map.
    pub fn attention(&self, y: &Tensor) -> Result<Tensor> {
        tensor::mhsa_attention(
            &self.query.forward(y)?,
            &self.key.forward(y)?,
            &self.value.forward(y)?,
            &self.pos_row,
            &self.pos_col,
            self.heads,
            self.scale_logits,
        )
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        let y = self.bn_in.forward(&self.conv_in.forward(x)?, training)?.relu()?;
        let y = self.bn_mid.forward(&self.attention(&y)?, training)?.relu()?;
        let y = self.bn_out.forward(&self.conv_out.forward(&y)?, training)?;
        y.add(x)?.relu()
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        self.conv_in.visit(&format!("{prefix}.conv_in"), f);
        self.bn_in.visit(&format!("{prefix}.bn_in"), f);
        self.query.visit(&format!("{prefix}.q"), f);
        self.key.visit(&format!("{prefix}.k"), f);
        self.value.visit(&format!("{prefix}.v"), f);
        f(format!("{prefix}.pos.row"), &self.pos_row, false);
        f(format!("{prefix}.pos.col"), &self.pos_col, false);
        self.bn_mid.visit(&format!("{prefix}.bn_mid"), f);
        self.conv_out.visit(&format!("{prefix}.conv_out"), f);
        self.bn_out.visit(&format!("{prefix}.bn_out"), f);
    }
}

/// Linearized-regime check for a stack of identity-shortcut blocks: runs the
/// stack, also accumulates x + sum of branch outputs along the trajectory,
/// and returns (stack output, instrumented accumulation).
pub fn stacked_residual_identity_check(
    blocks: &[ResidualBlock],
    x: &Tensor,
    training: bool,
) -> Result<(Tensor, Tensor)> {
    let mut cur = x.clone();
    let mut acc = x.clone();
    for (i, blk) in blocks.iter().enumerate() {
        if blk.downsample.is_some() {
            return Err(Error::Shape(format!(
                "stacked identity check: block {i} has a projection shortcut"
            )));
        }
        if !blk.identity_activation {
            return Err(Error::Shape(format!(
                "stacked identity check: block {i} still applies relu"
            )));
        }
        let branch = blk.branch(&cur, training)?;
        acc = acc.add(&branch)?;
        cur = cur.add(&branch)?;
    }
    Ok((cur, acc))
}
