use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::uniform_vec;

use super::layers::Parameters;
use super::tensor::{dot, Tensor};

/// Same-padded (zero padding) 2-D convolution over `[H×W×C]` maps.
///
/// Weights are laid out `[out][ky][kx][in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    kernel: usize,
    in_channels: usize,
    out_channels: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(kernel: usize, in_channels: usize, out_channels: usize) -> Result<Self> {
        if kernel == 0 || kernel.is_multiple_of(2) {
            return Err(Error::argument(format!("kernel size must be odd and >= 1, got {kernel}")));
        }
        Ok(Conv2d {
            kernel,
            in_channels,
            out_channels,
            weight: vec![0.0; out_channels * kernel * kernel * in_channels],
            bias: vec![0.0; out_channels],
        })
    }

    /// Uniform init scaled by fan-in `k²·in`.
    pub fn seeded(kernel: usize, in_channels: usize, out_channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut c = Conv2d::zeros(kernel, in_channels, out_channels)?;
        let bound = 1.0 / ((kernel * kernel * in_channels) as f64).sqrt();
        c.weight = uniform_vec(rng, c.weight.len(), bound);
        c.bias = uniform_vec(rng, out_channels, bound);
        Ok(c)
    }

    /// 1×1 identity mapping (requires `in == out`).
    pub fn identity_1x1(channels: usize) -> Self {
        let mut c = Conv2d::zeros(1, channels, channels).expect("1 is odd");
        for o in 0..channels {
            c.weight[o * channels + o] = 1.0;
        }
        c
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn set_zero(&mut self) {
        self.weight.iter_mut().for_each(|w| *w = 0.0);
        self.bias.iter_mut().for_each(|b| *b = 0.0);
    }

    fn widx(&self, o: usize, ky: usize, kx: usize) -> usize {
        ((o * self.kernel + ky) * self.kernel + kx) * self.in_channels
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize)> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.in_channels {
            return Err(Error::argument(format!(
                "conv expects [H,W,{}] input, got {s:?}",
                self.in_channels
            )));
        }
        Ok((s[0], s[1]))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (h, w) = self.check_input(x)?;
        let (k, cin, cout) = (self.kernel, self.in_channels, self.out_channels);
        let pad = k / 2;
        let xd = x.data();
        let mut out = vec![0.0; h * w * cout];
        for y in 0..h {
            for xx in 0..w {
                let o_row = &mut out[(y * w + xx) * cout..(y * w + xx + 1) * cout];
                o_row.copy_from_slice(&self.bias);
                for ky in 0..k {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xx as isize + kx as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let base = (sy as usize * w + sx as usize) * cin;
                        let inp = &xd[base..base + cin];
                        for (o, ov) in o_row.iter_mut().enumerate() {
                            let wi = self.widx(o, ky, kx);
                            *ov += dot(&self.weight[wi..wi + cin], inp);
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_parts(vec![h, w, cout], out))
    }

    /// Returns `(d_input, parameter grads)` for upstream gradient `d_out`.
    pub fn backward(&self, x: &Tensor, d_out: &Tensor) -> Result<(Tensor, Conv2dGrads)> {
        let (h, w) = self.check_input(x)?;
        let (k, cin, cout) = (self.kernel, self.in_channels, self.out_channels);
        if d_out.shape() != [h, w, cout] {
            return Err(Error::argument("conv backward: upstream gradient shape mismatch"));
        }
        let pad = k / 2;
        let xd = x.data();
        let gd = d_out.data();
        let mut dx = vec![0.0; h * w * cin];
        let mut dw = vec![0.0; self.weight.len()];
        let mut db = vec![0.0; cout];
        for y in 0..h {
            for xx in 0..w {
                let g_row = &gd[(y * w + xx) * cout..(y * w + xx + 1) * cout];
                for (acc, g) in db.iter_mut().zip(g_row) {
                    *acc += g;
                }
                for ky in 0..k {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xx as isize + kx as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let base = (sy as usize * w + sx as usize) * cin;
                        for (o, &g) in g_row.iter().enumerate() {
                            if g == 0.0 {
                                continue;
                            }
                            let wi = self.widx(o, ky, kx);
                            for i in 0..cin {
                                dx[base + i] += g * self.weight[wi + i];
                                dw[wi + i] += g * xd[base + i];
                            }
                        }
                    }
                }
            }
        }
        Ok((Tensor::from_parts(vec![h, w, cin], dx), Conv2dGrads { weight: dw, bias: db }))
    }
}

impl Parameters for Conv2d {
    fn flatten(&self) -> Vec<f64> {
        [self.weight.as_slice(), self.bias.as_slice()].concat()
    }

    fn load_flat(&mut self, flat: &[f64]) {
        let n = self.weight.len();
        self.weight.copy_from_slice(&flat[..n]);
        let nb = self.bias.len();
        self.bias.copy_from_slice(&flat[n..n + nb]);
    }
}
