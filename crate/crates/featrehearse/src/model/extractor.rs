//! The feature extractor: an ordered stack of layers ending in a flat
//! descriptor vector.

use super::init::fan_in_uniform;
use super::layers::{
    flatten_backward, flatten_forward, maxpool_backward, maxpool_forward, relu_backward,
    relu_forward, Act, Conv2d, Dense,
};
use crate::data::ImageShape;
use crate::error::{Error, Result};
use crate::real::Real;
use ndarray::{Array1, Array2, Array4};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Architecture description, one entry per layer. Serialized into
/// checkpoints so a saved model can be rebuilt without out-of-band knowledge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        size: usize,
    },
    Flatten,
    Dense {
        inputs: usize,
        outputs: usize,
    },
}

#[derive(Debug, Clone)]
enum Layer<F> {
    Conv(Conv2d<F>),
    Relu,
    Pool(usize),
    Flatten,
    Dense(Dense<F>),
}

/// Per-layer state saved by a cached forward pass.
pub struct Tape<F> {
    inputs: Vec<Act<F>>,
    cols: Vec<Option<Array2<F>>>,
    argmax: Vec<Option<Vec<u32>>>,
    output: Array2<F>,
}

impl<F: Real> Tape<F> {
    pub fn output(&self) -> &Array2<F> {
        &self.output
    }
    pub fn batch_len(&self) -> usize {
        self.output.nrows()
    }
}

#[derive(Debug, Clone)]
pub struct Extractor<F> {
    specs: Vec<LayerSpec>,
    layers: Vec<Layer<F>>,
    input_shape: ImageShape,
    output_dim: usize,
    param_count: usize,
}

/// Tracks tensor geometry while validating an architecture.
enum Geometry {
    Spatial(usize, usize, usize),
    Flat(usize),
}

fn validate(input: ImageShape, specs: &[LayerSpec]) -> Result<usize> {
    let mut geo = Geometry::Spatial(input.channels, input.height, input.width);
    for (i, spec) in specs.iter().enumerate() {
        geo = match (spec, geo) {
            (
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    padding,
                },
                Geometry::Spatial(c, h, w),
            ) => {
                if *in_channels != c {
                    return Err(Error::Config(format!(
                        "layer {i}: conv expects {in_channels} channels but receives {c}"
                    )));
                }
                if *kernel == 0 || *out_channels == 0 {
                    return Err(Error::Config(format!(
                        "layer {i}: conv kernel and out_channels must be positive"
                    )));
                }
                let oh = (h + 2 * padding).checked_sub(kernel - 1);
                let ow = (w + 2 * padding).checked_sub(kernel - 1);
                match (oh, ow) {
                    (Some(oh), Some(ow)) if oh > 0 && ow > 0 => {
                        Geometry::Spatial(*out_channels, oh, ow)
                    }
                    _ => {
                        return Err(Error::Config(format!(
                            "layer {i}: conv kernel {kernel} too large for {h}x{w} input"
                        )))
                    }
                }
            }
            (LayerSpec::Relu, g) => g,
            (LayerSpec::MaxPool { size }, Geometry::Spatial(c, h, w)) => {
                if *size == 0 || h % size != 0 || w % size != 0 {
                    return Err(Error::Config(format!(
                        "layer {i}: pool size {size} must evenly divide {h}x{w}"
                    )));
                }
                Geometry::Spatial(c, h / size, w / size)
            }
            (LayerSpec::Flatten, Geometry::Spatial(c, h, w)) => Geometry::Flat(c * h * w),
            (LayerSpec::Dense { inputs, outputs }, Geometry::Flat(d)) => {
                if *inputs != d {
                    return Err(Error::Config(format!(
                        "layer {i}: dense expects {inputs} inputs but receives {d}"
                    )));
                }
                if *outputs == 0 {
                    return Err(Error::Config(format!("layer {i}: dense outputs must be positive")));
                }
                Geometry::Flat(*outputs)
            }
            (spec, _) => {
                return Err(Error::Config(format!(
                    "layer {i}: {spec:?} cannot follow the preceding layer's output rank"
                )))
            }
        };
    }
    match geo {
        Geometry::Flat(d) => Ok(d),
        Geometry::Spatial(..) => Err(Error::Config(
            "architecture must end in a flat descriptor (add a flatten layer)".into(),
        )),
    }
}

impl<F: Real> Extractor<F> {
    /// Builds the architecture and initializes parameters from `rng`
    /// (fan-in uniform weights, zero biases).
    pub fn new(input_shape: ImageShape, specs: &[LayerSpec], rng: &mut ChaCha8Rng) -> Result<Self> {
        let output_dim = validate(input_shape, specs)?;
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            layers.push(match *spec {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    padding,
                } => {
                    let fan_in = in_channels * kernel * kernel;
                    let weight = Array4::from_shape_simple_fn(
                        (out_channels, in_channels, kernel, kernel),
                        || fan_in_uniform::<F>(fan_in, rng),
                    );
                    Layer::Conv(Conv2d {
                        weight,
                        bias: Array1::zeros(out_channels),
                        padding,
                    })
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::MaxPool { size } => Layer::Pool(size),
                LayerSpec::Flatten => Layer::Flatten,
                LayerSpec::Dense { inputs, outputs } => {
                    let weight = Array2::from_shape_simple_fn((outputs, inputs), || {
                        fan_in_uniform::<F>(inputs, rng)
                    });
                    Layer::Dense(Dense {
                        weight,
                        bias: Array1::zeros(outputs),
                    })
                }
            });
        }
        let param_count = layers.iter().map(layer_param_count).sum();
        Ok(Self {
            specs: specs.to_vec(),
            layers,
            input_shape,
            output_dim,
            param_count,
        })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }
    pub fn input_shape(&self) -> ImageShape {
        self.input_shape
    }
    pub fn output_dim(&self) -> usize {
        self.output_dim
    }
    pub fn param_count(&self) -> usize {
        self.param_count
    }

    /// Inference-only forward pass.
    pub fn features(&self, x: &Array4<F>) -> Array2<F> {
        let mut act = Act::Spatial(x.clone());
        for layer in &self.layers {
            act = match layer {
                Layer::Conv(c) => Act::Spatial(c.forward(act.spatial()).0),
                Layer::Relu => relu_forward(&act),
                Layer::Pool(s) => Act::Spatial(maxpool_forward(act.spatial(), *s).0),
                Layer::Flatten => Act::Flat(flatten_forward(act.spatial())),
                Layer::Dense(d) => Act::Flat(d.forward(act.flat())),
            };
        }
        match act {
            Act::Flat(a) => a,
            Act::Spatial(_) => unreachable!("validated architectures end flat"),
        }
    }

    /// Forward pass that records everything backward needs.
    pub fn forward_cached(&self, x: &Array4<F>) -> Tape<F> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cols = Vec::with_capacity(self.layers.len());
        let mut argmax = Vec::with_capacity(self.layers.len());
        let mut act = Act::Spatial(x.clone());
        for layer in &self.layers {
            let (next, col, arg) = match layer {
                Layer::Conv(c) => {
                    let (y, col) = c.forward(act.spatial());
                    (Act::Spatial(y), Some(col), None)
                }
                Layer::Relu => (relu_forward(&act), None, None),
                Layer::Pool(s) => {
                    let (y, arg) = maxpool_forward(act.spatial(), *s);
                    (Act::Spatial(y), None, Some(arg))
                }
                Layer::Flatten => (Act::Flat(flatten_forward(act.spatial())), None, None),
                Layer::Dense(d) => (Act::Flat(d.forward(act.flat())), None, None),
            };
            inputs.push(act);
            cols.push(col);
            argmax.push(arg);
            act = next;
        }
        let output = match act {
            Act::Flat(a) => a,
            Act::Spatial(_) => unreachable!("validated architectures end flat"),
        };
        Tape {
            inputs,
            cols,
            argmax,
            output,
        }
    }

    /// Accumulates parameter gradients into `grads` (length `param_count`,
    /// layout matching [`read_params`](Self::read_params)).
    pub fn backward(&self, tape: &Tape<F>, grad_output: Array2<F>, grads: &mut [F]) {
        debug_assert_eq!(grads.len(), self.param_count);
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut at = 0usize;
        for layer in &self.layers {
            offsets.push(at);
            at += layer_param_count(layer);
        }
        let mut grad = Act::Flat(grad_output);
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &tape.inputs[i];
            grad = match layer {
                Layer::Dense(d) => {
                    let (gx, gw, gb) = d.backward(input.flat(), grad.flat());
                    write_grads(&mut grads[offsets[i]..], gw.iter().chain(gb.iter()));
                    Act::Flat(gx)
                }
                Layer::Flatten => {
                    let shape = input.spatial().dim();
                    let g = match grad {
                        Act::Flat(g) => g,
                        _ => unreachable!(),
                    };
                    Act::Spatial(flatten_backward(shape, g))
                }
                Layer::Pool(_) => {
                    let shape = input.spatial().dim();
                    let arg = tape.argmax[i].as_ref().unwrap();
                    Act::Spatial(maxpool_backward(shape, arg, grad.spatial()))
                }
                Layer::Relu => relu_backward(input, grad),
                Layer::Conv(c) => {
                    let x = input.spatial();
                    let cols = tape.cols[i].as_ref().unwrap();
                    let (gx, gw, gb) = c.backward(x.dim(), cols, grad.spatial(), i > 0);
                    write_grads(&mut grads[offsets[i]..], gw.iter().chain(gb.iter()));
                    match gx {
                        Some(gx) => Act::Spatial(gx),
                        // First layer: input gradient is never consumed.
                        None => Act::Spatial(Array4::zeros((0, 0, 0, 0))),
                    }
                }
            };
        }
    }

    /// Flattens all parameters (layer order; weights before biases).
    pub fn read_params(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.param_count);
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.extend(c.weight.iter().copied());
                    out.extend(c.bias.iter().copied());
                }
                Layer::Dense(d) => {
                    out.extend(d.weight.iter().copied());
                    out.extend(d.bias.iter().copied());
                }
                _ => {}
            }
        }
        out
    }

    pub fn write_params(&mut self, vals: &[F]) -> Result<()> {
        if vals.len() != self.param_count {
            return Err(Error::Dimension(format!(
                "extractor has {} parameters, got {}",
                self.param_count,
                vals.len()
            )));
        }
        let mut at = 0usize;
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => {
                    for w in c.weight.iter_mut() {
                        *w = vals[at];
                        at += 1;
                    }
                    for b in c.bias.iter_mut() {
                        *b = vals[at];
                        at += 1;
                    }
                }
                Layer::Dense(d) => {
                    for w in d.weight.iter_mut() {
                        *w = vals[at];
                        at += 1;
                    }
                    for b in d.bias.iter_mut() {
                        *b = vals[at];
                        at += 1;
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn layer_param_count<F>(layer: &Layer<F>) -> usize {
    match layer {
        Layer::Conv(c) => c.weight.len() + c.bias.len(),
        Layer::Dense(d) => d.weight.len() + d.bias.len(),
        _ => 0,
    }
}

fn write_grads<'a, F: Real + 'a>(dst: &mut [F], src: impl Iterator<Item = &'a F>) {
    for (i, g) in src.enumerate() {
        dst[i] += *g;
    }
}

/// Small two-block CNN used as the default extractor: conv-relu-pool twice,
/// then a dense projection to the descriptor size.
pub fn default_cnn(input: ImageShape, descriptor_dim: usize) -> Result<Vec<LayerSpec>> {
    if input.height % 4 != 0 || input.width % 4 != 0 {
        return Err(Error::Config(format!(
            "default architecture pools twice; input {}x{} must be divisible by 4",
            input.height, input.width
        )));
    }
    let flat = 16 * (input.height / 4) * (input.width / 4);
    Ok(vec![
        LayerSpec::Conv {
            in_channels: input.channels,
            out_channels: 8,
            kernel: 3,
            padding: 1,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool { size: 2 },
        LayerSpec::Conv {
            in_channels: 8,
            out_channels: 16,
            kernel: 3,
            padding: 1,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool { size: 2 },
        LayerSpec::Flatten,
        LayerSpec::Dense {
            inputs: flat,
            outputs: descriptor_dim,
        },
    ])
}

/// Extractor that just flattens raw pixels (useful for tiny diagnostics).
pub fn identity_arch(input: ImageShape) -> Vec<LayerSpec> {
    let _ = input;
    vec![LayerSpec::Flatten]
}
