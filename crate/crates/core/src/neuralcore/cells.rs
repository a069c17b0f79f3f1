use rand::Rng;

use crate::error::{Error, Result};

use super::graph::{Graph, NodeId};
use super::tensor::{sigmoid, Tensor};

/// LSTM cell weights. Gates are stacked in the fixed order
/// (input, forget, cell candidate, output), each block `hidden` rows tall:
/// `w` is `[4h, d]`, `u` is `[4h, h]`, `b` is `[4h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCellParams {
    pub input: usize,
    pub hidden: usize,
    pub w: Tensor,
    pub u: Tensor,
    pub b: Tensor,
}

impl LstmCellParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            input,
            hidden,
            w: Tensor::zeros(&[4 * hidden, input]),
            u: Tensor::zeros(&[4 * hidden, hidden]),
            b: Tensor::zeros(&[4 * hidden]),
        }
    }

    /// Uniform(-1/sqrt(h), 1/sqrt(h)) weights; forget-gate bias starts at 1.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w = Tensor::uniform(&[4 * hidden, input], bound, rng);
        let u = Tensor::uniform(&[4 * hidden, hidden], bound, rng);
        let mut b = Tensor::uniform(&[4 * hidden], bound, rng);
        b.data_mut()[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        Self { input, hidden, w, u, b }
    }

    pub fn param_count(input: usize, hidden: usize) -> usize {
        4 * hidden * (input + hidden + 1)
    }

    pub fn into_tensors(self) -> [Tensor; 3] {
        [self.w, self.u, self.b]
    }
}

/// One LSTM step on plain vectors:
/// `c_t = f * c_prev + i * g`, `h_t = o * tanh(c_t)`.
pub fn lstm_cell_step(p: &LstmCellParams, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (d, h) = (p.input, p.hidden);
    if x.len() != d || h_prev.len() != h || c_prev.len() != h {
        return Err(Error::Shape(format!(
            "lstm step expects x[{d}], h[{h}], c[{h}]; got {}, {}, {}",
            x.len(),
            h_prev.len(),
            c_prev.len()
        )));
    }
    if p.w.shape() != [4 * h, d] || p.u.shape() != [4 * h, h] || p.b.len() != 4 * h {
        return Err(Error::Shape("lstm parameter shapes inconsistent".into()));
    }
    let (w, u, b) = (p.w.data(), p.u.data(), p.b.data());
    let z: Vec<f64> = (0..4 * h)
        .map(|r| {
            let wx: f64 = w[r * d..(r + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum();
            let uh: f64 = u[r * h..(r + 1) * h].iter().zip(h_prev).map(|(a, b)| a * b).sum();
            wx + uh + b[r]
        })
        .collect();
    let mut h_t = vec![0.0; h];
    let mut c_t = vec![0.0; h];
    for j in 0..h {
        let i = sigmoid(z[j]);
        let f = sigmoid(z[h + j]);
        let g = z[2 * h + j].tanh();
        let o = sigmoid(z[3 * h + j]);
        c_t[j] = f * c_prev[j] + i * g;
        h_t[j] = o * c_t[j].tanh();
    }
    Ok((h_t, c_t))
}

/// Graph handles for one LSTM layer's weights.
#[derive(Debug, Clone, Copy)]
pub struct LstmNodes {
    pub w: NodeId,
    pub u: NodeId,
    pub b: NodeId,
    pub hidden: usize,
}

/// Batched LSTM step on the graph: `x [B, d]`, `h, c [B, h]`.
pub fn lstm_step(g: &mut Graph, p: &LstmNodes, x: NodeId, h: NodeId, c: NodeId) -> Result<(NodeId, NodeId)> {
    let hs = p.hidden;
    let wx = g.matmul_bt(x, p.w)?;
    let uh = g.matmul_bt(h, p.u)?;
    let s = g.add(wx, uh)?;
    let z = g.add_row_bias(s, p.b)?;
    gates_to_state(g, z, c, hs)
}

/// Applies gate nonlinearities to stacked pre-activations `z [B, 4n]`.
fn gates_to_state(g: &mut Graph, z: NodeId, c: NodeId, n: usize) -> Result<(NodeId, NodeId)> {
    let zi = g.slice_cols(z, 0, n)?;
    let zf = g.slice_cols(z, n, n)?;
    let zg = g.slice_cols(z, 2 * n, n)?;
    let zo = g.slice_cols(z, 3 * n, n)?;
    let i = g.sigmoid(zi);
    let f = g.sigmoid(zf);
    let gg = g.tanh(zg);
    let o = g.sigmoid(zo);
    let fc = g.mul(f, c)?;
    let ig = g.mul(i, gg)?;
    let c_new = g.add(fc, ig)?;
    let tc = g.tanh(c_new);
    let h_new = g.mul(o, tc)?;
    Ok((h_new, c_new))
}

/// 1-D ConvLSTM cell over the feature axis. A single convolution over the
/// channel concatenation `[x, h]` produces all four gates:
/// `weight` is `[4 h_c, c_in + h_c, k]`, `bias` is `[4 h_c]`, gate blocks in
/// the order (input, forget, cell candidate, output).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLstmCellParams {
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub kernel: usize,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLstmCellParams {
    pub fn init<R: Rng + ?Sized>(in_channels: usize, hidden_channels: usize, kernel: usize, rng: &mut R) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("conv kernel must be odd, got {kernel}")));
        }
        let bound = 1.0 / (hidden_channels as f64).sqrt();
        let weight = Tensor::uniform(&[4 * hidden_channels, in_channels + hidden_channels, kernel], bound, rng);
        let mut bias = Tensor::uniform(&[4 * hidden_channels], bound, rng);
        bias.data_mut()[hidden_channels..2 * hidden_channels]
            .iter_mut()
            .for_each(|v| *v = 1.0);
        Ok(Self {
            in_channels,
            hidden_channels,
            kernel,
            weight,
            bias,
        })
    }

    pub fn param_count(in_channels: usize, hidden_channels: usize, kernel: usize) -> usize {
        4 * hidden_channels * kernel * (in_channels + hidden_channels) + 4 * hidden_channels
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvLstmNodes {
    pub weight: NodeId,
    pub bias: NodeId,
    pub in_channels: usize,
    pub hidden_channels: usize,
}

/// Batched ConvLSTM step: `x [B, c_in * L]`, `h, c [B, h_c * L]`.
pub fn conv_lstm_step(
    g: &mut Graph,
    p: &ConvLstmNodes,
    x: NodeId,
    h: NodeId,
    c: NodeId,
    positions: usize,
) -> Result<(NodeId, NodeId)> {
    let xh = g.concat_cols(&[x, h])?;
    let z = g.conv1d(xh, p.weight, p.bias, p.in_channels + p.hidden_channels, positions)?;
    gates_to_state(g, z, c, p.hidden_channels * positions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_halve_the_cell() {
        let p = LstmCellParams::zeros(3, 2);
        let c_prev = [0.8, -1.2];
        let (h, c) = lstm_cell_step(&p, &[1.0, 2.0, 3.0], &[0.3, 0.4], &c_prev).unwrap();
        for j in 0..2 {
            assert_eq!(c[j], 0.5 * c_prev[j]);
            assert_eq!(h[j], 0.5 * (0.5 * c_prev[j]).tanh());
        }
    }

    #[test]
    fn saturated_forget_gate_keeps_memory() {
        let mut p = LstmCellParams::zeros(1, 1);
        // gate rows: i, f, g, o
        p.b.data_mut()[1] = 30.0;
        let (_, c) = lstm_cell_step(&p, &[0.7], &[0.1], &[0.42]).unwrap();
        assert!((c[0] - 0.42).abs() < 1e-9);
    }

    #[test]
    fn outputs_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = LstmCellParams::init(4, 5, &mut rng);
        let mut h = vec![0.0; 5];
        let mut c = vec![0.0; 5];
        for t in 0..50 {
            let x: Vec<f64> = (0..4).map(|i| ((t * 3 + i) as f64).sin() * 10.0).collect();
            let (h2, c2) = lstm_cell_step(&p, &x, &h, &c).unwrap();
            assert!(h2.iter().all(|v| v.abs() < 1.0));
            h = h2;
            c = c2;
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let p = LstmCellParams::zeros(3, 2);
        assert!(matches!(lstm_cell_step(&p, &[1.0], &[0.0; 2], &[0.0; 2]), Err(Error::Shape(_))));
    }

    #[test]
    fn graph_step_matches_plain_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = LstmCellParams::init(3, 4, &mut rng);
        let x = [0.2, -0.4, 0.9];
        let h0 = [0.1, 0.0, -0.3, 0.2];
        let c0 = [0.5, -0.1, 0.0, 0.3];
        let (h1, c1) = lstm_cell_step(&p, &x, &h0, &c0).unwrap();
        let mut g = Graph::new();
        let nodes = LstmNodes {
            w: g.param(p.w.clone()),
            u: g.param(p.u.clone()),
            b: g.param(p.b.clone()),
            hidden: 4,
        };
        let xn = g.input(Tensor::new(vec![1, 3], x.to_vec()).unwrap());
        let hn = g.input(Tensor::new(vec![1, 4], h0.to_vec()).unwrap());
        let cn = g.input(Tensor::new(vec![1, 4], c0.to_vec()).unwrap());
        let (hg, cg) = lstm_step(&mut g, &nodes, xn, hn, cn).unwrap();
        for j in 0..4 {
            assert!((g.value(hg).data()[j] - h1[j]).abs() < 1e-14);
            assert!((g.value(cg).data()[j] - c1[j]).abs() < 1e-14);
        }
    }

    #[test]
    fn param_counts() {
        assert_eq!(LstmCellParams::param_count(4, 8), 416);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = ConvLstmCellParams::init(1, 3, 5, &mut rng).unwrap();
        assert_eq!(p.weight.len() + p.bias.len(), ConvLstmCellParams::param_count(1, 3, 5));
        assert!(ConvLstmCellParams::init(1, 3, 4, &mut rng).is_err());
    }
}
