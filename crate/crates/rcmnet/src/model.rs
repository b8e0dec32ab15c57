//! Assembly of the four ablation architectures (plain ResNet18, +CBAM, +BoT,
//! and both), forward execution, parameter freezing, and binary checkpoints.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{BatchNorm, Conv, Linear, MhsaBlock, ResidualBlock};
use crate::error::{Error, Result};
use crate::init;
use crate::tensor::{self, PoolMode, Tensor};

pub const MHSA_HEADS: usize = 4;
pub const CBAM_REDUCTION: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    ResNet18,
    ResNet18C,
    ResNet18M,
    Rcmnet,
}

impl Arch {
    pub fn id(&self) -> &'static str {
        match self {
            Arch::ResNet18 => "resnet18",
            Arch::ResNet18C => "resnet18-c",
            Arch::ResNet18M => "resnet18-m",
            Arch::Rcmnet => "rcmnet",
        }
    }

    pub fn parse(s: &str) -> Result<Arch> {
        match s {
            "resnet18" => Ok(Arch::ResNet18),
            "resnet18-c" => Ok(Arch::ResNet18C),
            "resnet18-m" => Ok(Arch::ResNet18M),
            "rcmnet" => Ok(Arch::Rcmnet),
            other => Err(Error::Config(format!(
                "unknown architecture '{other}' (expected resnet18, resnet18-c, resnet18-m or rcmnet)"
            ))),
        }
    }

    /// CBAM inside every residual block (the -C variants).
    pub fn has_cbam(&self) -> bool {
        matches!(self, Arch::ResNet18C | Arch::Rcmnet)
    }

    /// Trailing BoT block (the -M variants).
    pub fn has_bot(&self) -> bool {
        matches!(self, Arch::ResNet18M | Arch::Rcmnet)
    }

    pub const ALL: [Arch; 4] = [Arch::ResNet18, Arch::ResNet18C, Arch::ResNet18M, Arch::Rcmnet];
}

fn conv_out(side: usize, k: usize, stride: usize, padding: usize) -> usize {
    (side + 2 * padding - k) / stride + 1
}

/// Spatial side at each stage for a given input side.
pub fn stage_sides(input_side: usize) -> StageSides {
    let conv1 = conv_out(input_side, 7, 2, 3);
    let maxpool = conv_out(conv1, 3, 2, 1);
    let layer1 = maxpool;
    let layer2 = conv_out(layer1, 3, 2, 1);
    let layer3 = conv_out(layer2, 3, 2, 1);
    let layer4 = conv_out(layer3, 3, 2, 1);
    StageSides {
        conv1,
        maxpool,
        layer1,
        layer2,
        layer3,
        layer4,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSides {
    pub conv1: usize,
    pub maxpool: usize,
    pub layer1: usize,
    pub layer2: usize,
    pub layer3: usize,
    pub layer4: usize,
}

pub struct ModelGraph {
    pub arch: Arch,
    pub num_classes: usize,
    pub input_side: usize,
    pub base_width: usize,
    conv1: Conv,
    bn1: BatchNorm,
    layers: Vec<Vec<ResidualBlock>>,
    layer5: Option<MhsaBlock>,
    fc: Linear,
}

/// Intermediate activations of one forward pass, keyed by stage name
/// (conv1, maxpool, layer1..layer5, pooled, logits).
pub type StageOutputs = Vec<(String, Tensor)>;

impl ModelGraph {
    pub fn build(arch: Arch, num_classes: usize, input_side: usize, seed: u64) -> Result<ModelGraph> {
        ModelGraph::build_scaled(arch, num_classes, input_side, seed, 64)
    }

    /// `base_width` scales the 64/128/256/512 channel plan; tests use 8.
    pub fn build_scaled(
        arch: Arch,
        num_classes: usize,
        input_side: usize,
        seed: u64,
        base_width: usize,
    ) -> Result<ModelGraph> {
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {num_classes}"
            )));
        }
        if input_side < 32 {
            return Err(Error::Config(format!(
                "input side {input_side} too small for five stride-2 reductions (minimum 32)"
            )));
        }
        if base_width % MHSA_HEADS != 0 {
            return Err(Error::Config(format!(
                "base width {base_width} must be divisible by {MHSA_HEADS} heads"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(init::sub_seed(seed, "init"));
        let w = base_width;
        let plan = [w, 2 * w, 4 * w, 8 * w];
        let sides = stage_sides(input_side);

        let conv1 = Conv::new(&mut rng, 3, w, 7, 2, 3, false);
        let bn1 = BatchNorm::new(w);
        let mut layers = Vec::with_capacity(4);
        let mut cin = w;
        for (li, &cout) in plan.iter().enumerate() {
            let stride = if li == 0 { 1 } else { 2 };
            let b0 = ResidualBlock::new(&mut rng, cin, cout, stride, arch.has_cbam(), CBAM_REDUCTION);
            let b1 = ResidualBlock::new(&mut rng, cout, cout, 1, arch.has_cbam(), CBAM_REDUCTION);
            layers.push(vec![b0, b1]);
            cin = cout;
        }
        let layer5 = arch
            .has_bot()
            .then(|| MhsaBlock::new(&mut rng, plan[3], MHSA_HEADS, sides.layer4, sides.layer4));
        let fc = Linear::new(&mut rng, plan[3], num_classes, true);

        Ok(ModelGraph {
            arch,
            num_classes,
            input_side,
            base_width,
            conv1,
            bn1,
            layers,
            layer5,
            fc,
        })
    }

    pub fn forward(&self, batch: &Tensor, training: bool) -> Result<Tensor> {
        Ok(self.forward_stages(batch, training)?.pop().unwrap().1)
    }

    /// Forward pass that keeps every stage output alive, so callers can read
    /// activations and their gradients after backward (Grad-CAM hooks).
    pub fn forward_stages(&self, batch: &Tensor, training: bool) -> Result<StageOutputs> {
        match *batch.shape() {
            [_, 3, h, w] if h == self.input_side && w == self.input_side => {}
            _ => {
                return Err(Error::Shape(format!(
                    "forward: expected [N,3,{0},{0}] batch, got {1:?}",
                    self.input_side,
                    batch.shape()
                )))
            }
        }
        let n = batch.shape()[0];
        let mut stages: StageOutputs = Vec::with_capacity(9);
        let mut x = self
            .bn1
            .forward(&self.conv1.forward(batch)?, training)?
            .relu()?;
        stages.push(("conv1".into(), x.clone()));
        x = tensor::pool2d(&x, PoolMode::Max, 3, 2, 1)?;
        stages.push(("maxpool".into(), x.clone()));
        for (li, layer) in self.layers.iter().enumerate() {
            for block in layer {
                x = block.forward(&x, training)?;
            }
            stages.push((format!("layer{}", li + 1), x.clone()));
        }
        if let Some(bot) = &self.layer5 {
            x = bot.forward(&x, training)?;
            stages.push(("layer5".into(), x.clone()));
        }
        let pooled = tensor::global_pool(&x, PoolMode::Avg)?.reshape(&[n, 8 * self.base_width])?;
        stages.push(("pooled".into(), pooled.clone()));
        let logits = self.fc.forward(&pooled)?;
        stages.push(("logits".into(), logits));
        Ok(stages)
    }

    /// All persisted tensors as (dotted name, tensor, is_buffer). Buffers are
    /// batch-norm running statistics: saved and restored but never optimized.
    pub fn named_tensors(&self) -> Vec<(String, Tensor, bool)> {
        let mut out: Vec<(String, Tensor, bool)> = Vec::new();
        {
            let mut f = |name: String, t: &Tensor, buf: bool| out.push((name, t.clone(), buf));
            self.conv1.visit("conv1", &mut f);
            self.bn1.visit("bn1", &mut f);
            for (li, layer) in self.layers.iter().enumerate() {
                for (bi, block) in layer.iter().enumerate() {
                    block.visit(&format!("layer{}.{}", li + 1, bi), &mut f);
                }
            }
            if let Some(bot) = &self.layer5 {
                bot.visit("layer5", &mut f);
            }
            self.fc.visit("fc", &mut f);
        }
        out
    }

    /// Optimizable parameters (no buffers).
    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        self.named_tensors()
            .into_iter()
            .filter(|(_, _, buf)| !buf)
            .map(|(n, t, _)| (n, t))
            .collect()
    }

    pub fn trainable_parameters(&self) -> Vec<(String, Tensor)> {
        self.parameters()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .collect()
    }

    /// Marks parameters whose name satisfies the predicate trainable and
    /// freezes the rest. Returns the number of trainable scalar parameters;
    /// zero means the predicate matched nothing.
    pub fn set_trainable(&self, predicate: impl Fn(&str) -> bool) -> usize {
        let mut count = 0;
        for (name, t) in self.parameters() {
            let on = predicate(&name);
            t.set_requires_grad(on);
            if on {
                count += t.len();
            }
        }
        count
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grads(&self) {
        for (_, t, _) in self.named_tensors() {
            t.zero_grad();
        }
    }

    pub fn classifier(&self) -> &Linear {
        &self.fc
    }

    /// Replaces the classifier with a freshly initialized head of the given
    /// width (transfer learning).
    pub fn reset_classifier(&mut self, num_classes: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(init::sub_seed(seed, "classifier-init"));
        self.fc = Linear::new(&mut rng, 8 * self.base_width, num_classes, true);
        self.num_classes = num_classes;
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let bytes = checkpoint_bytes(self);
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<ModelGraph> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        model_from_checkpoint_bytes(&bytes)
    }
}

// ---- checkpoint byte format ----
//
// magic "RCMN" | u32 version=1 | u16 arch-id length + UTF-8 arch id |
// u32 class count | u32 tensor count | per tensor: u16 name length + UTF-8
// name, u8 dtype (0 = f64, 1 = f32), u8 rank, rank x u32 extents, row-major
// little-endian payload. Model geometry (input side, base width) rides along
// as ordinary 1-element "meta.*" tensors, like the batch-norm buffers do.

const MAGIC: &[u8; 4] = b"RCMN";
const VERSION: u32 = 1;

fn checkpoint_bytes(model: &ModelGraph) -> Vec<u8> {
    let mut entries: Vec<(String, Vec<usize>, Vec<f64>)> = vec![
        (
            "meta.input_side".into(),
            vec![1],
            vec![model.input_side as f64],
        ),
        (
            "meta.base_width".into(),
            vec![1],
            vec![model.base_width as f64],
        ),
    ];
    for (name, t, _) in model.named_tensors() {
        entries.push((name, t.shape().to_vec(), t.to_vec()));
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let id = model.arch.id().as_bytes();
    out.extend_from_slice(&(id.len() as u16).to_le_bytes());
    out.extend_from_slice(id);
    out.extend_from_slice(&(model.num_classes as u32).to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, shape, data) in &entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(0u8); // dtype: f64
        out.push(shape.len() as u8);
        for &e in shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated payload".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8 in name".into()))
    }
}

pub struct CheckpointHeader {
    pub arch: Arch,
    pub num_classes: usize,
}

/// Reads just enough of a checkpoint to identify it.
pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let (arch, num_classes, _) = read_header(&mut r)?;
    Ok(CheckpointHeader { arch, num_classes })
}

fn read_header(r: &mut Reader) -> Result<(Arch, usize, usize)> {
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic (not an RCMN checkpoint)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let arch = Arch::parse(&r.string()?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let num_classes = r.u32()? as usize;
    let tensor_count = r.u32()? as usize;
    Ok((arch, num_classes, tensor_count))
}

fn model_from_checkpoint_bytes(bytes: &[u8]) -> Result<ModelGraph> {
    let mut r = Reader { bytes, pos: 0 };
    let (arch, num_classes, tensor_count) = read_header(&mut r)?;

    let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::with_capacity(tensor_count);
    for _ in 0..tensor_count {
        let name = r.string()?;
        let dtype = r.u8()?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let data = match dtype {
            0 => r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            1 => r
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            d => return Err(Error::Checkpoint(format!("unknown dtype tag {d}"))),
        };
        tensors.push((name, shape, data));
    }

    let meta = |key: &str| -> Result<usize> {
        tensors
            .iter()
            .find(|(n, _, _)| n == key)
            .map(|(_, _, d)| d[0] as usize)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{key}'")))
    };
    let input_side = meta("meta.input_side")?;
    let base_width = meta("meta.base_width")?;

    let model = ModelGraph::build_scaled(arch, num_classes, input_side, 0, base_width)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut targets: HashMap<String, Tensor> = model
        .named_tensors()
        .into_iter()
        .map(|(n, t, _)| (n, t))
        .collect();

    for (name, shape, data) in &tensors {
        if name.starts_with("meta.") {
            continue;
        }
        let target = targets.remove(name).ok_or_else(|| {
            Error::Checkpoint(format!("tensor '{name}' does not belong to {}", arch.id()))
        })?;
        if target.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}': shape {:?} in file, {:?} expected",
                shape,
                target.shape()
            )));
        }
        target.set_data(data);
    }
    if let Some(missing) = targets.keys().next() {
        return Err(Error::Checkpoint(format!("missing tensor '{missing}'")));
    }
    Ok(model)
}
