//! The five network architectures, their parameters and checkpoints.
//!
//! Strides and windows are `[z, y, x]`. Downsampling halves x and y and
//! keeps z, so every variable-depth network accepts any number of slices.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{
    he_normal_init, load_checkpoint, save_checkpoint, Act, Checkpoint, Gradients, Padding, Scalar, Tape, Tensor, Var,
};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const NORM_EPS: f64 = 1e-5;

const XY_DOWN: [usize; 3] = [1, 2, 2];
const XY_POOL: [usize; 3] = [1, 3, 3];
const ISO_DOWN: [usize; 3] = [2, 2, 2];
const K3: [usize; 3] = [3, 3, 3];
const K1: [usize; 3] = [1, 1, 1];

/// Architecture descriptor; stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArchSpec {
    DeepvoxGenerator {
        widths: Vec<usize>,
        residual_blocks: usize,
    },
    DeepvoxDiscriminator {
        widths: Vec<usize>,
        convs: Vec<usize>,
    },
    Deepaaa {
        widths: Vec<usize>,
    },
    Unet3dFixed {
        widths: Vec<usize>,
        fixed_z: usize,
    },
    Savect {
        widths: Vec<usize>,
        /// Convolutions per block before doubling.
        convs: Vec<usize>,
    },
}

pub const DISC_CONVS: [usize; 5] = [1, 1, 2, 2, 2];

impl ArchSpec {
    pub fn deepvox_generator() -> Self {
        ArchSpec::DeepvoxGenerator {
            widths: vec![16, 32, 64, 128],
            residual_blocks: 2,
        }
    }

    pub fn deepvox_discriminator() -> Self {
        ArchSpec::DeepvoxDiscriminator {
            widths: vec![32, 64, 128, 128, 128],
            convs: DISC_CONVS.to_vec(),
        }
    }

    pub fn deepaaa() -> Self {
        ArchSpec::Deepaaa {
            widths: vec![32, 64, 128, 256],
        }
    }

    pub fn unet3d_fixed() -> Self {
        ArchSpec::Unet3dFixed {
            widths: vec![32, 64, 128, 256],
            fixed_z: 128,
        }
    }

    pub fn savect() -> Self {
        ArchSpec::Savect {
            widths: vec![32, 64, 128, 128, 128],
            convs: DISC_CONVS.to_vec(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ArchSpec::DeepvoxGenerator { .. } => "deepvox_generator",
            ArchSpec::DeepvoxDiscriminator { .. } => "deepvox_discriminator",
            ArchSpec::Deepaaa { .. } => "deepaaa",
            ArchSpec::Unet3dFixed { .. } => "unet3d_fixed",
            ArchSpec::Savect { .. } => "savect",
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            ArchSpec::DeepvoxDiscriminator { .. } => 2,
            _ => 1,
        }
    }

    fn widths(&self) -> &[usize] {
        match self {
            ArchSpec::DeepvoxGenerator { widths, .. }
            | ArchSpec::DeepvoxDiscriminator { widths, .. }
            | ArchSpec::Deepaaa { widths }
            | ArchSpec::Unet3dFixed { widths, .. }
            | ArchSpec::Savect { widths, .. } => widths,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.widths();
        if w.is_empty() || w.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "{}: widths must be non-empty and positive",
                self.name()
            )));
        }
        match self {
            ArchSpec::DeepvoxDiscriminator { convs, .. } | ArchSpec::Savect { convs, .. } => {
                if convs.len() != w.len() || convs.contains(&0) {
                    return Err(Error::InvalidConfig(format!(
                        "{}: need one positive conv count per width",
                        self.name()
                    )));
                }
            }
            ArchSpec::Unet3dFixed { fixed_z, .. } if *fixed_z == 0 || fixed_z % self.xy_multiple() != 0 => {
                return Err(Error::InvalidConfig(format!(
                    "unet3d_fixed: fixed_z must be a positive multiple of {}",
                    self.xy_multiple()
                )));
            }
            _ => {}
        }
        Ok(())
    }

    /// Factor by which the input XY extent (and the fixed Z) must be divisible.
    fn xy_multiple(&self) -> usize {
        match self {
            ArchSpec::DeepvoxGenerator { widths, .. }
            | ArchSpec::Deepaaa { widths }
            | ArchSpec::Unet3dFixed { widths, .. } => 1 << (widths.len() - 1),
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    ConvTranspose,
    Dense,
    Head,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    spec: ArchSpec,
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
    layers: Vec<Layer>,
}

/// Handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Output {
    /// Final activation (probabilities, or raw scores for the discriminator).
    pub out: Var,
    /// Pre-sigmoid score.
    pub logit: Var,
    /// Output of the layer requested via `capture`.
    pub captured: Option<Var>,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

struct Builder<T> {
    seed: u64,
    params: Vec<Param<T>>,
    layers: Vec<Layer>,
}

impl<T: Scalar> Builder<T> {
    fn add(&mut self, name: String, tensor: Tensor<T>) {
        self.params.push(Param {
            name,
            tensor,
            trainable: true,
        });
    }

    fn kernel(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) {
        let s = seed::derive(self.seed, name);
        self.add(format!("{name}.w"), he_normal_init(shape, fan_in, s));
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: [usize; 3], kind: LayerKind) {
        let fan_in = cin * k.iter().product::<usize>();
        self.kernel(name, vec![cout, cin, k[0], k[1], k[2]], fan_in);
        self.add(format!("{name}.b"), Tensor::zeros(vec![cout]));
        self.layers.push(Layer {
            name: name.to_string(),
            kind,
        });
    }

    fn conv_t(&mut self, name: &str, cin: usize, cout: usize, k: [usize; 3]) {
        let fan_in = cin * k.iter().product::<usize>();
        self.kernel(name, vec![cin, cout, k[0], k[1], k[2]], fan_in);
        self.add(format!("{name}.b"), Tensor::zeros(vec![cout]));
        self.layers.push(Layer {
            name: name.to_string(),
            kind: LayerKind::ConvTranspose,
        });
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.add(format!("{name}.norm.g"), Tensor::full(vec![c], T::one()));
        self.add(format!("{name}.norm.b"), Tensor::zeros(vec![c]));
    }

    /// conv → (norm) → activation
    fn block(&mut self, name: &str, cin: usize, cout: usize, norm: bool) {
        self.conv(name, cin, cout, K3, LayerKind::Conv);
        if norm {
            self.norm(name, cout);
        }
    }

    fn dense(&mut self, name: &str, cin: usize, cout: usize) {
        self.kernel(name, vec![cout, cin], cin);
        self.add(format!("{name}.b"), Tensor::zeros(vec![cout]));
        self.layers.push(Layer {
            name: name.to_string(),
            kind: LayerKind::Dense,
        });
    }
}

fn build_unet_like<T: Scalar>(b: &mut Builder<T>, widths: &[usize], residual_blocks: Option<usize>) {
    let levels = widths.len();
    let double = residual_blocks.is_none();
    let mut cin = 1;
    for (i, &w) in widths.iter().enumerate() {
        if let (Some(_), true) = (residual_blocks, i > 0) {
            b.block(&format!("down{i}"), cin, w, true);
            cin = w;
        }
        b.block(&format!("enc{i}a"), cin, w, true);
        if double {
            b.block(&format!("enc{i}b"), w, w, true);
        }
        cin = w;
    }
    let bottom = widths[levels - 1];
    for r in 0..residual_blocks.unwrap_or(0) {
        b.block(&format!("res{r}a"), bottom, bottom, true);
        b.block(&format!("res{r}b"), bottom, bottom, true);
    }
    for i in (0..levels - 1).rev() {
        let w = widths[i];
        b.conv_t(&format!("up{i}"), cin, w, K3);
        b.norm(&format!("up{i}"), w);
        b.block(&format!("dec{i}a"), 2 * w, w, true);
        if double {
            b.block(&format!("dec{i}b"), w, w, true);
        }
        cin = w;
    }
    b.conv("head", cin, 1, K1, LayerKind::Head);
}

fn build_vgg<T: Scalar>(b: &mut Builder<T>, cin: usize, widths: &[usize], convs: &[usize], per_conv: usize) {
    let mut c = cin;
    for (bi, (&w, &n)) in widths.iter().zip(convs).enumerate() {
        for j in 0..n * per_conv {
            b.block(&format!("b{bi}c{j}"), c, w, bi > 0);
            c = w;
        }
    }
}

impl<T: Scalar> Network<T> {
    pub fn build(spec: ArchSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut b = Builder {
            seed,
            params: Vec::new(),
            layers: Vec::new(),
        };
        match &spec {
            ArchSpec::DeepvoxGenerator {
                widths,
                residual_blocks,
            } => build_unet_like(&mut b, widths, Some(*residual_blocks)),
            ArchSpec::Deepaaa { widths } | ArchSpec::Unet3dFixed { widths, .. } => {
                build_unet_like(&mut b, widths, None)
            }
            ArchSpec::DeepvoxDiscriminator { widths, convs } => {
                build_vgg(&mut b, 2, widths, convs, 1);
                b.conv("head", *widths.last().expect("validated"), 1, K1, LayerKind::Head);
            }
            ArchSpec::Savect { widths, convs } => {
                build_vgg(&mut b, 1, widths, convs, 2);
                b.dense("fc", *widths.last().expect("validated"), 1);
            }
        }
        let index = b.params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Ok(Network {
            spec,
            params: b.params,
            index,
            layers: b.layers,
        })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Number of 3×3×3 convolution layers (heads excluded).
    pub fn conv_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| l.kind == LayerKind::Conv).count()
    }

    pub fn last_conv_layer(&self) -> Option<&str> {
        self.layers
            .iter()
            .rev()
            .find(|l| l.kind == LayerKind::Conv)
            .map(|l| l.name.as_str())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, z, y, x]: [usize; 5] = shape
            .try_into()
            .map_err(|_| Error::WrongInputShape(format!("expected [N, C, Z, Y, X], got {shape:?}")))?;
        if c != self.spec.in_channels() {
            return Err(Error::WrongInputShape(format!(
                "{} expects {} input channels, got {c}",
                self.spec.name(),
                self.spec.in_channels()
            )));
        }
        let m = self.spec.xy_multiple();
        if x % m != 0 || y % m != 0 {
            return Err(Error::WrongInputShape(format!(
                "{}: XY extent {x}×{y} must be divisible by {m}",
                self.spec.name()
            )));
        }
        if let ArchSpec::Unet3dFixed { fixed_z, .. } = self.spec {
            if z != fixed_z {
                return Err(Error::WrongInputShape(format!(
                    "unet3d_fixed needs Z = {fixed_z}, got {z}; reshape the volume first"
                )));
            }
        }
        Ok(())
    }

    /// Runs the network on `x` (`[N, C, Z, Y, X]`). Parameters are bound as
    /// differentiable leaves when `trainable` is set, as constants otherwise.
    /// `capture` names a layer whose activated output is returned in
    /// [`Output::captured`].
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, trainable: bool, capture: Option<&str>) -> Result<Output> {
        self.run(tape, x, trainable, capture, vec![None; self.params.len()])
    }

    /// Second pass on the same tape reusing the parameter leaves bound by
    /// `previous`, so gradients of both passes land on one set of leaves.
    pub fn forward_shared(&self, tape: &mut Tape<T>, x: Var, previous: &Output) -> Result<Output> {
        if previous.bound.len() != self.params.len() {
            return Err(Error::ShapeMismatch("binding belongs to another network".into()));
        }
        let trainable = previous.trainable;
        self.run(tape, x, trainable, None, previous.bound.clone())
    }

    fn run(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        trainable: bool,
        capture: Option<&str>,
        bound: Vec<Option<Var>>,
    ) -> Result<Output> {
        self.check_input(tape.shape(x))?;
        if let Some(name) = capture {
            if !self.layers.iter().any(|l| l.name == name) {
                return Err(Error::LayerNotFound(name.to_string()));
            }
        }
        let mut ctx = Ctx {
            net: self,
            tape,
            bound,
            trainable,
            capture,
            captured: None,
        };
        let (out, logit) = match &self.spec {
            ArchSpec::DeepvoxGenerator {
                widths,
                residual_blocks,
            } => ctx.unet_like(x, widths.len(), Some(*residual_blocks), XY_DOWN, None)?,
            ArchSpec::Deepaaa { widths } => ctx.unet_like(x, widths.len(), None, XY_DOWN, Some((XY_POOL, XY_DOWN)))?,
            ArchSpec::Unet3dFixed { widths, .. } => {
                ctx.unet_like(x, widths.len(), None, ISO_DOWN, Some((ISO_DOWN, ISO_DOWN)))?
            }
            ArchSpec::DeepvoxDiscriminator { convs, .. } => {
                let h = ctx.vgg(x, convs, 1)?;
                let s = ctx.conv(h, "head", [1, 1, 1])?;
                (s, s)
            }
            ArchSpec::Savect { convs, .. } => {
                let h = ctx.vgg(x, convs, 2)?;
                let g = ctx.tape.global_avg_pool(h)?;
                let (w, b) = (ctx.p("fc.w"), ctx.p("fc.b"));
                let logit = ctx.tape.dense(g, w, b)?;
                (ctx.tape.activation(logit, Act::Sigmoid), logit)
            }
        };
        Ok(Output {
            out,
            logit,
            captured: ctx.captured,
            bound: ctx.bound,
            trainable,
        })
    }

    /// Gradients of this network's parameters from a forward pass, in
    /// parameter order.
    pub fn param_grads<'g>(&self, out: &Output, grads: &'g Gradients<T>) -> Vec<Option<&'g Tensor<T>>> {
        out.bound.iter().map(|v| v.and_then(|v| grads.get(v))).collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            arch: serde_json::to_value(&self.spec).expect("arch spec serializes"),
            tensors: self
                .params
                .iter()
                .map(|p| (p.name.clone(), p.tensor.cast::<f32>()))
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let spec: ArchSpec = serde_json::from_value(ck.arch.clone())
            .map_err(|e| Error::CheckpointMismatch(format!("unreadable architecture: {e}")))?;
        let mut net = Network::build(spec, 0)?;
        net.load_tensors(ck)?;
        Ok(net)
    }

    /// Replaces the parameters with those of a compatible checkpoint.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        let spec: ArchSpec = serde_json::from_value(ck.arch.clone())
            .map_err(|e| Error::CheckpointMismatch(format!("unreadable architecture: {e}")))?;
        if spec != self.spec {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint holds {:?}, network is {:?}",
                spec, self.spec
            )));
        }
        self.load_tensors(ck)
    }

    fn load_tensors(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.tensors.len() != self.params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint has {} tensors, network has {}",
                ck.tensors.len(),
                self.params.len()
            )));
        }
        for (name, t) in &ck.tensors {
            let p = self
                .param_mut(name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("unknown tensor {name:?}")))?;
            if p.tensor.shape() != t.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "{name}: checkpoint shape {:?}, network {:?}",
                    t.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor = t.cast();
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.to_checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Network::from_checkpoint(&load_checkpoint(path)?)
    }
}

pub fn build_deepvox_generator<T: Scalar>(seed: u64) -> Network<T> {
    Network::build(ArchSpec::deepvox_generator(), seed).expect("default spec is valid")
}

pub fn build_deepvox_discriminator<T: Scalar>(seed: u64) -> Network<T> {
    Network::build(ArchSpec::deepvox_discriminator(), seed).expect("default spec is valid")
}

pub fn build_deepaaa<T: Scalar>(seed: u64) -> Network<T> {
    Network::build(ArchSpec::deepaaa(), seed).expect("default spec is valid")
}

pub fn build_unet3d_fixed<T: Scalar>(seed: u64) -> Network<T> {
    Network::build(ArchSpec::unet3d_fixed(), seed).expect("default spec is valid")
}

pub fn build_savect<T: Scalar>(seed: u64) -> Network<T> {
    Network::build(ArchSpec::savect(), seed).expect("default spec is valid")
}

struct Ctx<'a, T> {
    net: &'a Network<T>,
    tape: &'a mut Tape<T>,
    bound: Vec<Option<Var>>,
    trainable: bool,
    capture: Option<&'a str>,
    captured: Option<Var>,
}

impl<T: Scalar> Ctx<'_, T> {
    fn p(&mut self, name: &str) -> Var {
        let i = *self
            .net
            .index
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from {}", self.net.spec.name()));
        if let Some(v) = self.bound[i] {
            return v;
        }
        let p = &self.net.params[i];
        let v = if self.trainable && p.trainable {
            self.tape.param(p.tensor.clone())
        } else {
            self.tape.constant(p.tensor.clone())
        };
        self.bound[i] = Some(v);
        v
    }

    fn conv(&mut self, x: Var, name: &str, stride: [usize; 3]) -> Result<Var> {
        let w = self.p(&format!("{name}.w"));
        let b = self.p(&format!("{name}.b"));
        self.tape.conv3d(x, w, Some(b), stride, Padding::Same)
    }

    fn norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let g = self.p(&format!("{name}.norm.g"));
        let b = self.p(&format!("{name}.norm.b"));
        self.tape.instance_norm(x, g, b, NORM_EPS)
    }

    fn lrelu(&mut self, x: Var) -> Var {
        self.tape.activation(x, Act::LeakyRelu(LEAKY_SLOPE))
    }

    fn mark(&mut self, name: &str, v: Var) {
        if self.capture == Some(name) {
            self.captured = Some(v);
        }
    }

    fn block(&mut self, x: Var, name: &str, stride: [usize; 3], norm: bool) -> Result<Var> {
        let mut h = self.conv(x, name, stride)?;
        if norm {
            h = self.norm(h, name)?;
        }
        let h = self.lrelu(h);
        self.mark(name, h);
        Ok(h)
    }

    fn head(&mut self, x: Var) -> Result<(Var, Var)> {
        let logit = self.conv(x, "head", [1, 1, 1])?;
        self.mark("head", logit);
        Ok((self.tape.activation(logit, Act::Sigmoid), logit))
    }

    /// Encoder–decoder. With `residual_blocks`, levels are linked by strided
    /// convolutions and each level has one conv; otherwise by max-pooling with
    /// two convs per level.
    fn unet_like(
        &mut self,
        x: Var,
        levels: usize,
        residual_blocks: Option<usize>,
        up_stride: [usize; 3],
        pool: Option<([usize; 3], [usize; 3])>,
    ) -> Result<(Var, Var)> {
        let double = residual_blocks.is_none();
        let mut h = x;
        let mut skips = Vec::new();
        for i in 0..levels {
            if i > 0 {
                h = match pool {
                    Some((window, stride)) => self.tape.maxpool3d(h, window, stride)?,
                    None => self.block(h, &format!("down{i}"), up_stride, true)?,
                };
            }
            h = self.block(h, &format!("enc{i}a"), [1, 1, 1], true)?;
            if double {
                h = self.block(h, &format!("enc{i}b"), [1, 1, 1], true)?;
            }
            skips.push(h);
        }
        for r in 0..residual_blocks.unwrap_or(0) {
            let a = self.block(h, &format!("res{r}a"), [1, 1, 1], true)?;
            let name = format!("res{r}b");
            let b = self.conv(a, &name, [1, 1, 1])?;
            let b = self.norm(b, &name)?;
            let s = self.tape.add(h, b)?;
            h = self.lrelu(s);
            self.mark(&name, h);
        }
        for i in (0..levels - 1).rev() {
            let name = format!("up{i}");
            let w = self.p(&format!("{name}.w"));
            let b = self.p(&format!("{name}.b"));
            let u = self.tape.conv3d_transpose(h, w, Some(b), up_stride)?;
            let u = self.norm(u, &name)?;
            let u = self.lrelu(u);
            self.mark(&name, u);
            let c = self.tape.concat_channels(u, skips[i])?;
            h = self.block(c, &format!("dec{i}a"), [1, 1, 1], true)?;
            if double {
                h = self.block(h, &format!("dec{i}b"), [1, 1, 1], true)?;
            }
        }
        self.head(h)
    }

    fn vgg(&mut self, x: Var, convs: &[usize], per_conv: usize) -> Result<Var> {
        let mut h = x;
        for (bi, &n) in convs.iter().enumerate() {
            for j in 0..n * per_conv {
                h = self.block(h, &format!("b{bi}c{j}"), [1, 1, 1], bi > 0)?;
            }
            h = self.tape.maxpool3d(h, XY_POOL, XY_DOWN)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_gen() -> ArchSpec {
        ArchSpec::DeepvoxGenerator {
            widths: vec![2, 3, 4],
            residual_blocks: 1,
        }
    }

    fn run(net: &Network<f32>, shape: Vec<usize>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let x = tape.constant(he_normal_init(shape, 1, 3));
        let o = net.forward(&mut tape, x, false, None)?;
        Ok(tape.value(o.out).clone())
    }

    #[test]
    fn generator_preserves_shape_for_any_z() {
        let net: Network<f32> = Network::build(small_gen(), 1).unwrap();
        for z in [4, 5, 9] {
            let y = run(&net, vec![1, 1, z, 8, 12]).unwrap();
            assert_eq!(y.shape(), &[1, 1, z, 8, 12]);
            assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        assert!(matches!(run(&net, vec![1, 1, 4, 6, 8]), Err(Error::WrongInputShape(_))));
        assert!(matches!(run(&net, vec![1, 2, 4, 8, 8]), Err(Error::WrongInputShape(_))));
    }

    #[test]
    fn builders_are_deterministic() {
        let a: Network<f32> = Network::build(small_gen(), 5).unwrap();
        let b: Network<f32> = Network::build(small_gen(), 5).unwrap();
        let c: Network<f32> = Network::build(small_gen(), 6).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn default_param_counts_and_conv_counts() {
        let g = build_deepvox_generator::<f32>(0);
        let a = build_deepaaa::<f32>(0);
        assert!(g.num_params() < a.num_params());
        let d = build_deepvox_discriminator::<f32>(0);
        let s = build_savect::<f32>(0);
        assert_eq!(d.conv_layer_count(), 8);
        assert_eq!(s.conv_layer_count(), 2 * d.conv_layer_count());
        assert!(g
            .params()
            .iter()
            .filter(|p| p.name.ends_with(".b") && !p.name.contains("norm"))
            .all(|p| p.tensor.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn discriminator_geometry_and_linearity() {
        let spec = ArchSpec::DeepvoxDiscriminator {
            widths: vec![2, 2, 2, 2, 2],
            convs: vec![1, 1, 1, 1, 1],
        };
        let net: Network<f32> = Network::build(spec, 2).unwrap();
        for z in [5, 12] {
            let y = run(&net, vec![1, 2, z, 64, 40]).unwrap();
            assert_eq!(y.shape(), &[1, 1, z, 2, 2]);
        }
    }

    #[test]
    fn unet_fixed_z() {
        let spec = ArchSpec::Unet3dFixed {
            widths: vec![2, 2],
            fixed_z: 8,
        };
        let net: Network<f32> = Network::build(spec, 2).unwrap();
        assert_eq!(run(&net, vec![1, 1, 8, 8, 8]).unwrap().shape(), &[1, 1, 8, 8, 8]);
        assert!(matches!(run(&net, vec![1, 1, 4, 8, 8]), Err(Error::WrongInputShape(_))));
    }

    #[test]
    fn savect_zero_input_gives_sigmoid_bias() {
        let spec = ArchSpec::Savect {
            widths: vec![2, 3],
            convs: vec![1, 2],
        };
        let mut net: Network<f64> = Network::build(spec, 2).unwrap();
        net.param_mut("fc.b").unwrap().tensor = Tensor::new(vec![1], vec![0.3]).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 4, 8, 8]));
        let o = net.forward(&mut tape, x, false, None).unwrap();
        let v = tape.value(o.out).item();
        assert!((v - 1.0 / (1.0 + (-0.3f64).exp())).abs() < 1e-12);
        assert_eq!(net.conv_layer_count(), 6);
    }

    #[test]
    fn capture_and_missing_layer() {
        let net: Network<f32> = Network::build(small_gen(), 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 4, 8, 8]));
        let o = net.forward(&mut tape, x, false, Some("enc0a")).unwrap();
        assert_eq!(tape.shape(o.captured.unwrap()), &[1, 2, 4, 8, 8]);
        assert!(matches!(
            net.forward(&mut tape, x, false, Some("nope")),
            Err(Error::LayerNotFound(_))
        ));
    }

    #[test]
    fn checkpoint_roundtrip_and_mismatch() {
        let net: Network<f32> = Network::build(small_gen(), 1).unwrap();
        let back: Network<f32> = Network::from_checkpoint(&net.to_checkpoint()).unwrap();
        assert_eq!(back.params(), net.params());
        let mut other: Network<f32> = Network::build(ArchSpec::Deepaaa { widths: vec![2, 3] }, 1).unwrap();
        assert!(matches!(
            other.load_checkpoint(&net.to_checkpoint()),
            Err(Error::CheckpointMismatch(_))
        ));
    }
}
