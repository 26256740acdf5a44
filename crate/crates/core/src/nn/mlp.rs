use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

use super::tape::{affine_forward, sigmoid, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Silu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Silu => x * sigmoid(x),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

/// Shape of the noise-prediction network: `data_dim + t_embed_dim` inputs,
/// the given hidden widths, and `data_dim` outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpArchitecture {
    pub data_dim: usize,
    pub t_embed_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for MlpArchitecture {
    fn default() -> Self {
        MlpArchitecture {
            data_dim: 2,
            t_embed_dim: 16,
            hidden: vec![64, 64],
            activation: Activation::Silu,
        }
    }
}

impl MlpArchitecture {
    pub fn in_dim(&self) -> usize {
        self.data_dim + self.t_embed_dim
    }

    pub fn out_dim(&self) -> usize {
        self.data_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 {
            return Err(Error::param("data_dim", "must be positive"));
        }
        if self.t_embed_dim == 0 || !self.t_embed_dim.is_multiple_of(2) {
            return Err(Error::param(
                "t_embed_dim",
                format!("{} is not a positive even number", self.t_embed_dim),
            ));
        }
        if self.hidden.contains(&0) {
            return Err(Error::param("hidden", "layer widths must be positive"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for each layer, input to output.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.in_dim()];
        widths.extend(&self.hidden);
        widths.push(self.out_dim());
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Flat parameter vector for an [`MlpArchitecture`]: per layer, the
/// `fan_out x fan_in` weight matrix (row-major) followed by the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    arch: MlpArchitecture,
    flat: Vec<f64>,
}

impl MlpParams {
    pub fn new(arch: MlpArchitecture, flat: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let expected = arch.param_count();
        if flat.len() != expected {
            return Err(Error::format(
                "parameters",
                format!(
                    "params length {} does not match architecture ({expected})",
                    flat.len()
                ),
            ));
        }
        Ok(MlpParams { arch, flat })
    }

    pub fn zeros(arch: MlpArchitecture) -> Result<Self> {
        let n = arch.param_count();
        Self::new(arch, vec![0.0; n])
    }

    pub fn arch(&self) -> &MlpArchitecture {
        &self.arch
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.flat
    }
}

/// Fan-in scaled uniform weights, zero biases.
pub fn init_params(arch: &MlpArchitecture, seed: u64) -> Result<MlpParams> {
    arch.validate()?;
    let mut rng = rng::stream(seed, 0);
    let mut flat = Vec::with_capacity(arch.param_count());
    for (fan_in, fan_out) in arch.layers() {
        let bound = 1.0 / (fan_in as f64).sqrt();
        flat.extend((0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)));
        flat.extend(std::iter::repeat_n(0.0, fan_out));
    }
    MlpParams::new(arch.clone(), flat)
}

/// Sinusoidal embedding of `t / T`, as interleaved `(sin, cos)` pairs with
/// angular frequencies spaced geometrically from `2 pi` to `2 pi * 1e4`.
pub fn time_embedding(t: usize, total: usize, dim: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; dim];
    write_time_embedding(t, total, &mut out)?;
    Ok(out)
}

fn write_time_embedding(t: usize, total: usize, out: &mut [f64]) -> Result<()> {
    let dim = out.len();
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::param(
            "t_embed_dim",
            format!("{dim} is not a positive even number"),
        ));
    }
    if t == 0 || t > total {
        return Err(Error::param("t", format!("step {t} outside 1..={total}")));
    }
    let u = t as f64 / total as f64;
    let half = dim / 2;
    for k in 0..half {
        let exponent = if half == 1 {
            0.0
        } else {
            4.0 * k as f64 / (dim - 2) as f64
        };
        let omega = 2.0 * std::f64::consts::PI * 10f64.powf(exponent);
        let (s, c) = (omega * u).sin_cos();
        out[2 * k] = s;
        out[2 * k + 1] = c;
    }
    Ok(())
}

/// Stacks `[x_row, embed(t_row)]` into one input matrix.
fn build_inputs(
    arch: &MlpArchitecture,
    xs: &[f64],
    ts: &[usize],
    total: usize,
) -> Result<Vec<f64>> {
    let d = arch.data_dim;
    if xs.len() != ts.len() * d {
        return Err(Error::dim("network input", ts.len() * d, xs.len()));
    }
    let width = arch.in_dim();
    let mut input = vec![0.0; ts.len() * width];
    for (r, &t) in ts.iter().enumerate() {
        let row = &mut input[r * width..(r + 1) * width];
        row[..d].copy_from_slice(&xs[r * d..(r + 1) * d]);
        write_time_embedding(t, total, &mut row[d..])?;
    }
    Ok(input)
}

/// Evaluates the network on a batch of rows; `ts[r]` is the step of row `r`.
pub fn forward_rows(
    params: &MlpParams,
    xs: &[f64],
    ts: &[usize],
    total: usize,
) -> Result<Vec<f64>> {
    let arch = &params.arch;
    let rows = ts.len();
    let mut h = build_inputs(arch, xs, ts, total)?;
    let layers = arch.layers();
    let mut offset = 0;
    for (li, &(fan_in, fan_out)) in layers.iter().enumerate() {
        let w = &params.flat[offset..offset + fan_in * fan_out];
        let b = &params.flat[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        let mut out = vec![0.0; rows * fan_out];
        affine_forward(&h, rows, w, b, fan_in, fan_out, &mut out);
        if li + 1 < layers.len() {
            for v in &mut out {
                *v = arch.activation.apply(*v);
            }
        }
        h = out;
        offset += fan_in * fan_out + fan_out;
    }
    Ok(h)
}

/// Evaluates the network on a batch of rows that share the step `t`.
pub fn forward_batch(params: &MlpParams, xs: &[f64], t: usize, total: usize) -> Result<Vec<f64>> {
    let d = params.arch.data_dim;
    if !xs.len().is_multiple_of(d) {
        return Err(Error::dim("network input", d, xs.len() % d));
    }
    forward_rows(params, xs, &vec![t; xs.len() / d], total)
}

/// The noise prediction `eps(x_t, t)` for a single point.
pub fn forward(params: &MlpParams, x_t: &[f64], t: usize, total: usize) -> Result<Vec<f64>> {
    if x_t.len() != params.arch.data_dim {
        return Err(Error::dim("network input", params.arch.data_dim, x_t.len()));
    }
    forward_rows(params, x_t, &[t], total)
}

/// Records the network on `tape`, whose parameter vector must be laid out for
/// `arch`. Returns the `rows x data_dim` output node.
pub fn forward_tape(
    tape: &mut Tape,
    arch: &MlpArchitecture,
    xs: &[f64],
    ts: &[usize],
    total: usize,
) -> Result<Var> {
    if tape.params().len() != arch.param_count() {
        return Err(Error::dim(
            "tape parameters",
            arch.param_count(),
            tape.params().len(),
        ));
    }
    let input = build_inputs(arch, xs, ts, total)?;
    let mut h = tape.constant(ts.len(), arch.in_dim(), input)?;
    let layers = arch.layers();
    let mut offset = 0;
    for (li, &(fan_in, fan_out)) in layers.iter().enumerate() {
        h = tape.affine(h, offset, fan_in, fan_out)?;
        if li + 1 < layers.len() {
            h = tape.activation(h, arch.activation);
        }
        offset += fan_in * fan_out + fan_out;
    }
    Ok(h)
}

/// `w * a + (1 - w) * b`, with the endpoints returned exactly.
pub fn interpolate_params(a: &MlpParams, b: &MlpParams, w: f64) -> Result<MlpParams> {
    if a.arch != b.arch {
        return Err(Error::Mismatch(
            "cannot interpolate parameters of different architectures".into(),
        ));
    }
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::param("w", format!("{w} not in [0, 1]")));
    }
    if w == 1.0 {
        return Ok(a.clone());
    }
    if w == 0.0 {
        return Ok(b.clone());
    }
    let flat = a
        .flat
        .iter()
        .zip(&b.flat)
        .map(|(x, y)| w * x + (1.0 - w) * y)
        .collect();
    MlpParams::new(a.arch.clone(), flat)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_param_count() {
        assert_eq!(MlpArchitecture::default().param_count(), 5506);
        let p = init_params(&MlpArchitecture::default(), 3).unwrap();
        assert_eq!(p.flat().len(), 5506);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let arch = MlpArchitecture::default();
        let a = init_params(&arch, 42).unwrap();
        let b = init_params(&arch, 42).unwrap();
        assert_eq!(a.flat(), b.flat());
        assert_ne!(a.flat(), init_params(&arch, 43).unwrap().flat());
        let mut offset = 0;
        for (fi, fo) in arch.layers() {
            let bound = 1.0 / (fi as f64).sqrt();
            assert!(a.flat()[offset..offset + fi * fo]
                .iter()
                .all(|w| w.abs() <= bound));
            assert!(a.flat()[offset + fi * fo..offset + fi * fo + fo]
                .iter()
                .all(|&b| b == 0.0));
            offset += fi * fo + fo;
        }
    }

    #[test]
    fn embedding_quarter_period() {
        let e = time_embedding(25, 100, 2).unwrap();
        assert!((e[0] - 1.0).abs() < 1e-15);
        assert!(e[1].abs() < 1e-15);
    }

    #[test]
    fn embedding_range_and_errors() {
        let e = time_embedding(37, 100, 16).unwrap();
        assert_eq!(e, time_embedding(37, 100, 16).unwrap());
        assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(time_embedding(0, 100, 16).is_err());
        assert!(time_embedding(101, 100, 16).is_err());
        assert!(time_embedding(1, 100, 3).is_err());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = MlpParams::zeros(MlpArchitecture::default()).unwrap();
        assert_eq!(forward(&p, &[0.7, -1.2], 10, 100).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn selecting_linear_layer_is_identity() {
        let arch = MlpArchitecture {
            data_dim: 2,
            t_embed_dim: 4,
            hidden: vec![],
            activation: Activation::Tanh,
        };
        let mut flat = vec![0.0; arch.param_count()];
        // weight rows pick out x_0 and x_1
        flat[0] = 1.0;
        flat[6 + 1] = 1.0;
        let p = MlpParams::new(arch, flat).unwrap();
        assert_eq!(forward(&p, &[0.25, -3.5], 4, 10).unwrap(), vec![0.25, -3.5]);
    }

    #[test]
    fn forward_is_lipschitz_on_instance() {
        let p = init_params(&MlpArchitecture::default(), 9).unwrap();
        let x = [0.3, -0.8];
        let f0 = forward(&p, &x, 50, 100).unwrap();
        // Estimate a local constant from small probes, then check a larger one.
        let mut l: f64 = 0.0;
        let mut rng = rng::stream(5, 0);
        for _ in 0..64 {
            let d = rng::normal_vec(&mut rng, 2);
            let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
            let xp = [x[0] + 1e-3 * d[0] / n, x[1] + 1e-3 * d[1] / n];
            let f1 = forward(&p, &xp, 50, 100).unwrap();
            let df = ((f1[0] - f0[0]).powi(2) + (f1[1] - f0[1]).powi(2)).sqrt();
            l = l.max(df / 1e-3);
        }
        let xp = [x[0] + 1e-4, x[1] - 1e-4];
        let f1 = forward(&p, &xp, 50, 100).unwrap();
        let df = ((f1[0] - f0[0]).powi(2) + (f1[1] - f0[1]).powi(2)).sqrt();
        assert!(df <= 1.5 * l * (2e-8f64).sqrt());
    }

    #[test]
    fn batch_rows_match_single_rows() {
        let p = init_params(&MlpArchitecture::default(), 1).unwrap();
        let xs = [0.1, 0.2, -1.0, 2.0, 0.5, 0.5];
        let batch = forward_batch(&p, &xs, 7, 100).unwrap();
        for r in 0..3 {
            assert_eq!(
                &batch[2 * r..2 * r + 2],
                forward(&p, &xs[2 * r..2 * r + 2], 7, 100)
                    .unwrap()
                    .as_slice()
            );
        }
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let arch = MlpArchitecture::default();
        let p = init_params(&arch, 2).unwrap();
        let xs = [0.1, 0.2, -1.0, 2.0];
        let ts = [3, 90];
        let mut tape = Tape::new(p.flat().to_vec());
        let out = forward_tape(&mut tape, &arch, &xs, &ts, 100).unwrap();
        assert_eq!(
            tape.value(out),
            forward_rows(&p, &xs, &ts, 100).unwrap().as_slice()
        );
    }

    #[test]
    fn interpolation_identities() {
        let arch = MlpArchitecture::default();
        let a = init_params(&arch, 1).unwrap();
        let b = init_params(&arch, 2).unwrap();
        assert_eq!(interpolate_params(&a, &b, 1.0).unwrap(), a);
        assert_eq!(interpolate_params(&a, &b, 0.0).unwrap(), b);
        let neg = MlpParams::new(arch.clone(), a.flat().iter().map(|x| -x).collect()).unwrap();
        assert!(interpolate_params(&a, &neg, 0.5)
            .unwrap()
            .flat()
            .iter()
            .all(|&x| x == 0.0));
        let w = 0.3;
        let ab = interpolate_params(&a, &b, w).unwrap();
        let ba = interpolate_params(&b, &a, w).unwrap();
        for ((x, y), (pa, pb)) in ab
            .flat()
            .iter()
            .zip(ba.flat())
            .zip(a.flat().iter().zip(b.flat()))
        {
            assert!((x + y - (pa + pb)).abs() < 1e-15);
        }
        let other = init_params(
            &MlpArchitecture {
                hidden: vec![8],
                ..arch
            },
            1,
        )
        .unwrap();
        assert!(interpolate_params(&a, &other, 0.5).is_err());
    }
}
