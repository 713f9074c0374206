//! Layered feed-forward nets with explicit tapes for reverse-mode gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng::{self, tag};

/// Weight layout for dense layers is `[out_dim, in_dim]`; forward computes
/// `y = x Wt + b` over row-major batches.
#[derive(Clone, Debug)]
pub enum Layer {
    Dense { weight: Tensor, bias: Tensor },
    Relu,
    Dropout { rate: f64 },
    /// Identity on the forward pass; backward multiplies the upstream
    /// gradient by `-lambda`.
    GradReverse { lambda: f64 },
}

impl Layer {
    /// Dense layer with Xavier-uniform weights and zero bias.
    pub fn dense_xavier(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Layer {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        Layer::Dense {
            weight: Tensor::from_vec(&[out_dim, in_dim], data),
            bias: Tensor::zeros(&[out_dim]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// How dropout layers behave during a forward pass.
pub enum DropoutMode<'a> {
    /// Layer rates apply in `Train` mode; identity in `Eval` mode. The rng
    /// may be omitted only when no mask will be sampled.
    Auto(Option<&'a mut ChaCha8Rng>),
    /// Every dropout layer samples at `rate` regardless of mode.
    Force { rate: f64, rng: &'a mut ChaCha8Rng },
}

enum Record {
    Dense { input: Tensor },
    Relu { mask: Tensor },
    /// `None` means the layer was an identity (rate zero or eval mode).
    Dropout { mask: Option<Tensor> },
    GradReverse,
}

/// Per-pass activations needed by `backward`. Consumed on use so a tape can
/// never be replayed against refreshed activations.
pub struct Tape {
    records: Vec<Record>,
    output_shape: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct DenseGrad {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Parameter gradients, one entry per dense layer in forward order.
#[derive(Clone, Debug)]
pub struct NetGrads {
    pub dense: Vec<DenseGrad>,
}

impl NetGrads {
    pub fn zeros_like(net: &Net) -> NetGrads {
        let dense = net
            .layers
            .iter()
            .filter_map(|layer| match layer {
                Layer::Dense { weight, bias } => Some(DenseGrad {
                    weight: Tensor::zeros(weight.shape()),
                    bias: Tensor::zeros(bias.shape()),
                }),
                _ => None,
            })
            .collect();
        NetGrads { dense }
    }

    pub fn add_assign(&mut self, other: &NetGrads) {
        debug_assert_eq!(self.dense.len(), other.dense.len());
        for (a, b) in self.dense.iter_mut().zip(&other.dense) {
            a.weight.add_assign(&b.weight);
            a.bias.add_assign(&b.bias);
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for g in &mut self.dense {
            g.weight.scale_assign(s);
            g.bias.scale_assign(s);
        }
    }

    /// Same flattening order as `Net::append_params`.
    pub fn append_flat(&self, out: &mut Vec<f64>) {
        for g in &self.dense {
            out.extend_from_slice(g.weight.data());
            out.extend_from_slice(g.bias.data());
        }
    }
}

/// Read-only view over a flat parameter buffer.
pub struct ParamCursor<'a> {
    data: &'a [f64],
    pos: usize,
}

impl<'a> ParamCursor<'a> {
    pub fn new(data: &'a [f64]) -> ParamCursor<'a> {
        ParamCursor { data, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [f64]> {
        if self.pos + n > self.data.len() {
            return Err(Error::ShapeMismatch {
                context: "parameter buffer".into(),
                expected: format!("at least {} values", self.pos + n),
                got: format!("{}", self.data.len()),
            });
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }
}

#[derive(Clone, Debug)]
pub struct Net {
    layers: Vec<Layer>,
}

impl Net {
    pub fn new(layers: Vec<Layer>) -> Net {
        Net { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|layer| match layer {
                Layer::Dense { weight, bias } => weight.len() + bias.len(),
                _ => 0,
            })
            .sum()
    }

    /// Flattens parameters in layer order, weight before bias.
    pub fn append_params(&self, out: &mut Vec<f64>) {
        for layer in &self.layers {
            if let Layer::Dense { weight, bias } = layer {
                out.extend_from_slice(weight.data());
                out.extend_from_slice(bias.data());
            }
        }
    }

    /// Reads parameters back in the `append_params` order.
    pub fn read_params(&mut self, cursor: &mut ParamCursor) -> Result<()> {
        for layer in &mut self.layers {
            if let Layer::Dense { weight, bias } = layer {
                let w = cursor.take(weight.len())?;
                weight.data_mut().copy_from_slice(w);
                let b = cursor.take(bias.len())?;
                bias.data_mut().copy_from_slice(b);
            }
        }
        Ok(())
    }

    /// Replaces all parameters from a flat buffer sized exactly for this net.
    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::ShapeMismatch {
                context: "net parameters".into(),
                expected: format!("{}", self.param_count()),
                got: format!("{}", flat.len()),
            });
        }
        self.read_params(&mut ParamCursor::new(flat))
    }

    pub fn forward(
        &self,
        input: &Tensor,
        mode: Mode,
        mut dropout: DropoutMode,
    ) -> Result<(Tensor, Tape)> {
        let mut x = input.clone();
        let mut records = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            match layer {
                Layer::Dense { weight, bias } => {
                    let (out_dim, in_dim) = (weight.rows(), weight.cols());
                    if x.cols() != in_dim {
                        return Err(Error::ShapeMismatch {
                            context: "dense input".into(),
                            expected: format!("{in_dim} columns"),
                            got: format!("{} columns", x.cols()),
                        });
                    }
                    let n = x.rows();
                    let mut y = Tensor::zeros(&[n, out_dim]);
                    for r in 0..n {
                        let xi = x.row(r);
                        let yo = y.row_mut(r);
                        for j in 0..out_dim {
                            let w = weight.row(j);
                            let mut acc = bias.data()[j];
                            for i in 0..in_dim {
                                acc += w[i] * xi[i];
                            }
                            yo[j] = acc;
                        }
                    }
                    records.push(Record::Dense { input: x });
                    x = y;
                }
                Layer::Relu => {
                    let mut mask = Tensor::zeros(x.shape());
                    for (m, v) in mask.data_mut().iter_mut().zip(x.data_mut()) {
                        if *v > 0.0 {
                            *m = 1.0;
                        } else {
                            *v = 0.0;
                        }
                    }
                    records.push(Record::Relu { mask });
                }
                Layer::Dropout { rate } => {
                    let (eff_rate, rng) = match &mut dropout {
                        DropoutMode::Auto(rng) => {
                            let r = if mode == Mode::Train { *rate } else { 0.0 };
                            (r, rng.as_deref_mut())
                        }
                        DropoutMode::Force { rate, rng } => (*rate, Some(&mut **rng)),
                    };
                    if !(0.0..1.0).contains(&eff_rate) {
                        return Err(Error::InvalidArgument(format!(
                            "dropout rate {eff_rate} outside [0, 1)"
                        )));
                    }
                    if eff_rate == 0.0 {
                        records.push(Record::Dropout { mask: None });
                        continue;
                    }
                    let rng = rng.ok_or_else(|| {
                        Error::InvalidArgument("dropout mask requested without an rng".into())
                    })?;
                    // Inverted dropout: survivors are pre-scaled so eval
                    // needs no correction.
                    let keep_scale = 1.0 / (1.0 - eff_rate);
                    let mut mask = Tensor::zeros(x.shape());
                    for (m, v) in mask.data_mut().iter_mut().zip(x.data_mut()) {
                        if rng.gen::<f64>() >= eff_rate {
                            *m = keep_scale;
                        }
                        *v *= *m;
                    }
                    records.push(Record::Dropout { mask: Some(mask) });
                }
                Layer::GradReverse { .. } => {
                    records.push(Record::GradReverse);
                }
            }
        }
        let output_shape = x.shape().to_vec();
        Ok((
            x,
            Tape {
                records,
                output_shape,
            },
        ))
    }

    /// Returns parameter gradients and the gradient with respect to the
    /// forward input.
    pub fn backward(&self, tape: Tape, upstream: &Tensor) -> Result<(NetGrads, Tensor)> {
        if upstream.shape() != tape.output_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                context: "backward upstream".into(),
                expected: format!("{:?}", tape.output_shape),
                got: format!("{:?}", upstream.shape()),
            });
        }
        let mut grad = upstream.clone();
        let mut dense_rev = Vec::new();
        for (layer, record) in self.layers.iter().zip(tape.records).rev() {
            match (layer, record) {
                (Layer::Dense { weight, bias }, Record::Dense { input }) => {
                    let (out_dim, in_dim) = (weight.rows(), weight.cols());
                    let n = input.rows();
                    let mut dw = Tensor::zeros(&[out_dim, in_dim]);
                    let mut db = Tensor::zeros(&[bias.len()]);
                    let mut dx = Tensor::zeros(&[n, in_dim]);
                    for r in 0..n {
                        let up = grad.row(r);
                        let xi = input.row(r);
                        let dxi = dx.row_mut(r);
                        for j in 0..out_dim {
                            let g = up[j];
                            db.data_mut()[j] += g;
                            let w = weight.row(j);
                            let dwj = dw.row_mut(j);
                            for i in 0..in_dim {
                                dwj[i] += g * xi[i];
                                dxi[i] += g * w[i];
                            }
                        }
                    }
                    dense_rev.push(DenseGrad {
                        weight: dw,
                        bias: db,
                    });
                    grad = dx;
                }
                (Layer::Relu, Record::Relu { mask }) => {
                    for (g, m) in grad.data_mut().iter_mut().zip(mask.data()) {
                        *g *= m;
                    }
                }
                (Layer::Dropout { .. }, Record::Dropout { mask }) => {
                    if let Some(mask) = mask {
                        for (g, m) in grad.data_mut().iter_mut().zip(mask.data()) {
                            *g *= m;
                        }
                    }
                }
                (Layer::GradReverse { lambda }, Record::GradReverse) => {
                    grad.scale_assign(-lambda);
                }
                _ => {
                    return Err(Error::InvalidArgument(
                        "tape does not match net layout".into(),
                    ))
                }
            }
        }
        dense_rev.reverse();
        Ok((NetGrads { dense: dense_rev }, grad))
    }
}

/// Central-difference check of `backward` against the scalar objective
/// `sum_k(u_k * y_k)` for a random projection `u`. Dropout masks are replayed
/// by reseeding the mask rng per evaluation. Returns the worst relative
/// error over all parameters and input entries.
pub fn grad_check(net: &mut Net, input: &Tensor, mode: Mode, step: f64, seed: u64) -> Result<f64> {
    let eval = |net: &Net, input: &Tensor, u: &[f64]| -> Result<f64> {
        let mut mask_rng = rng::stream(seed, &[tag::GRAD_CHECK, 1]);
        let (y, _) = net.forward(input, mode, DropoutMode::Auto(Some(&mut mask_rng)))?;
        Ok(y.data().iter().zip(u).map(|(a, b)| a * b).sum())
    };

    let mut mask_rng = rng::stream(seed, &[tag::GRAD_CHECK, 1]);
    let (y, tape) = net.forward(input, mode, DropoutMode::Auto(Some(&mut mask_rng)))?;
    let mut proj_rng = rng::stream(seed, &[tag::GRAD_CHECK, 2]);
    let u: Vec<f64> = (0..y.len()).map(|_| proj_rng.gen_range(-1.0..=1.0)).collect();
    let upstream = Tensor::from_vec(y.shape(), u.clone());
    let (grads, dinput) = net.backward(tape, &upstream)?;

    let mut analytic = Vec::new();
    grads.append_flat(&mut analytic);
    let mut params = Vec::new();
    net.append_params(&mut params);

    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
    let mut worst = 0.0f64;
    for p in 0..params.len() {
        let kept = params[p];
        params[p] = kept + step;
        net.set_params(&params)?;
        let fp = eval(net, input, &u)?;
        params[p] = kept - step;
        net.set_params(&params)?;
        let fm = eval(net, input, &u)?;
        params[p] = kept;
        net.set_params(&params)?;
        worst = worst.max(rel(analytic[p], (fp - fm) / (2.0 * step)));
    }
    let mut probe = input.clone();
    for e in 0..probe.len() {
        let kept = probe.data()[e];
        probe.data_mut()[e] = kept + step;
        let fp = eval(net, &probe, &u)?;
        probe.data_mut()[e] = kept - step;
        let fm = eval(net, &probe, &u)?;
        probe.data_mut()[e] = kept;
        worst = worst.max(rel(dinput.data()[e], (fp - fm) / (2.0 * step)));
    }
    Ok(worst)
}
