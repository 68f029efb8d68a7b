//! Image-level reconstruction and PSNR scoring for the benchmark commands.

use std::str::FromStr;

use crate::amp::{amp_reconstruct_with_pinv, AmpConfig, PseudoInverse};
use crate::dct::TransformD;
use crate::error::{CsError, Result};
use crate::image_io::{quantize, Image};
use crate::kernels;
use crate::model::Network;
use crate::sensing::{make_gaussian_phi, partition_blocks, reassemble};
use crate::tape::{Mode, Tape};
use crate::tensor::Tensor;

/// Blocks evaluated per tape; bounds peak activation memory.
const EVAL_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Amp,
    AmpNet,
    AmpaNet,
}

impl FromStr for Method {
    type Err = CsError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "amp" => Ok(Method::Amp),
            "amp-net" => Ok(Method::AmpNet),
            "ampa-net" => Ok(Method::AmpaNet),
            other => Err(CsError::parameter(format!(
                "unknown method {other} (want amp, amp-net, or ampa-net)"
            ))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Amp => write!(f, "amp"),
            Method::AmpNet => write!(f, "amp-net"),
            Method::AmpaNet => write!(f, "ampa-net"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ReconOptions {
    pub ratio: f64,
    /// Block edge for the classical solver; networks use their own.
    pub block: usize,
    pub seed: u64,
    pub iters: usize,
    pub alpha: f64,
    /// Sense with a fresh seeded Gaussian Φ instead of the checkpoint's W_φ.
    pub fixed_phi: bool,
}

impl Default for ReconOptions {
    fn default() -> Self {
        ReconOptions {
            ratio: 0.25,
            block: crate::sensing::BLOCK_SIZE,
            seed: 0,
            iters: 100,
            alpha: 1.0,
            fixed_phi: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReconReport {
    pub blocks: usize,
    /// Blocks where the classical solver diverged and the pseudo-inverse
    /// solution was substituted.
    pub diverged: usize,
}

/// Classical AMP over every block of a [0,1] plane.
pub fn reconstruct_plane_amp(plane: &Tensor, opts: &ReconOptions) -> Result<(Tensor, ReconReport)> {
    let n_p = opts.block * opts.block;
    let sys = make_gaussian_phi(opts.ratio, n_p, opts.seed)?;
    let d = TransformD::dct2(opts.block);
    let (blocks, grid) = partition_blocks(plane, opts.block)?;
    let y = sys.measure(&blocks)?;
    let pinv = PseudoInverse::new(&sys.phi)?;
    let cfg = AmpConfig {
        max_iters: opts.iters,
        alpha: opts.alpha,
        ..AmpConfig::default()
    };

    let nb = grid.block_count();
    let mut out = vec![0.0; nb * n_p];
    let mut report = ReconReport {
        blocks: nb,
        diverged: 0,
    };
    for b in 0..nb {
        let yb = Tensor::from_vec(&[sys.m_p], y.row(b).to_vec())?;
        let xb = match amp_reconstruct_with_pinv(&yb, &sys, &d, &pinv, &cfg) {
            Ok(outcome) => outcome.x_hat,
            Err(CsError::Divergence { .. }) => {
                report.diverged += 1;
                pinv.apply(&yb)?
            }
            Err(e) => return Err(e),
        };
        out[b * n_p..(b + 1) * n_p].copy_from_slice(xb.data());
    }
    let out = Tensor::from_vec(&[nb, n_p], out)?;
    let plane = reassemble(&out, &grid)?;
    Ok((plane, report))
}

/// Learned reconstruction over every block of a [0,1] plane. Sensing uses
/// the network's W_φ unless `fixed_phi` substitutes a seeded Gaussian.
pub fn reconstruct_plane_net(
    plane: &Tensor,
    net: &mut Network,
    opts: &ReconOptions,
) -> Result<(Tensor, ReconReport)> {
    if (net.config.ratio - opts.ratio).abs() > 1e-12 {
        return Err(CsError::parameter(format!(
            "checkpoint was trained at ratio {}, requested {}",
            net.config.ratio, opts.ratio
        )));
    }
    let block = net.config.block;
    let n_p = net.config.n_p();
    let m_p = net.m_p;
    let (blocks, grid) = partition_blocks(plane, block)?;
    let nb = grid.block_count();

    let y = if opts.fixed_phi {
        let sys = make_gaussian_phi(opts.ratio, n_p, opts.seed)?;
        sys.measure(&blocks)?
    } else {
        let w_phi = &net.param("w_phi").expect("model defines w_phi").value;
        let data = kernels::mat_bt(blocks.data(), w_phi.data(), nb, n_p, m_p);
        Tensor::from_vec(&[nb, m_p], data)?
    };

    let mut out = vec![0.0; nb * n_p];
    let mut done = 0;
    while done < nb {
        let take = EVAL_CHUNK.min(nb - done);
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let chunk = Tensor::from_vec(
            &[take, m_p],
            y.data()[done * m_p..(done + take) * m_p].to_vec(),
        )?;
        let yn = tape.constant(chunk);
        let f = net.forward_bound(&mut tape, &bound, yn, Mode::Eval, None)?;
        out[done * n_p..(done + take) * n_p].copy_from_slice(tape.value(f.x_hat).data());
        done += take;
    }
    let out = Tensor::from_vec(&[nb, n_p], out)?;
    let plane = reassemble(&out, &grid)?;
    Ok((plane, ReconReport {
        blocks: nb,
        diverged: 0,
    }))
}

fn reconstruct_plane(
    plane: &Tensor,
    method: Method,
    net: Option<&mut Network>,
    opts: &ReconOptions,
) -> Result<(Tensor, ReconReport)> {
    match method {
        Method::Amp => reconstruct_plane_amp(plane, opts),
        Method::AmpNet | Method::AmpaNet => {
            let net = net.ok_or_else(|| {
                CsError::parameter(format!("method {method} needs a checkpoint"))
            })?;
            reconstruct_plane_net(plane, net, opts)
        }
    }
}

/// Reconstruct a full image; RGB images go through channel by channel.
pub fn reconstruct_image(
    img: &Image,
    method: Method,
    mut net: Option<&mut Network>,
    opts: &ReconOptions,
) -> Result<(Image, ReconReport)> {
    match img {
        Image::Gray { width, height, .. } => {
            let plane = img.to_gray_tensor()?;
            let (rec, report) = reconstruct_plane(&plane, method, net.as_deref_mut(), opts)?;
            Ok((
                Image::Gray {
                    width: *width,
                    height: *height,
                    pixels: quantize(&rec),
                },
                report,
            ))
        }
        Image::Rgb { width, height, .. } => {
            let rgb = img.to_rgb_tensor()?;
            let plane_len = width * height;
            let mut pixels = vec![0u8; 3 * plane_len];
            let mut report = ReconReport::default();
            for c in 0..3 {
                let chan = Tensor::from_vec(
                    &[*height, *width],
                    rgb.data()[c * plane_len..(c + 1) * plane_len].to_vec(),
                )?;
                let (rec, r) = reconstruct_plane(&chan, method, net.as_deref_mut(), opts)?;
                let q = quantize(&rec);
                for i in 0..plane_len {
                    pixels[3 * i + c] = q[i];
                }
                report.blocks += r.blocks;
                report.diverged += r.diverged;
            }
            Ok((
                Image::Rgb {
                    width: *width,
                    height: *height,
                    pixels,
                },
                report,
            ))
        }
    }
}

/// Mean squared error over 8-bit rasters.
pub fn mse(reference: &[u8], test: &[u8]) -> Result<f64> {
    if reference.len() != test.len() || reference.is_empty() {
        return Err(CsError::dimension(format!(
            "rasters hold {} and {} pixels",
            reference.len(),
            test.len()
        )));
    }
    let sum: f64 = reference
        .iter()
        .zip(test)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sum / reference.len() as f64)
}

/// 10·log10(peak²/MSE); identical rasters give the +∞ sentinel, which report
/// writers exclude from means.
pub fn psnr(reference: &[u8], test: &[u8], peak: f64) -> Result<f64> {
    if peak <= 0.0 {
        return Err(CsError::parameter("peak must be positive"));
    }
    let e = mse(reference, test)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / e).log10())
}

pub fn raster(img: &Image) -> &[u8] {
    match img {
        Image::Gray { pixels, .. } | Image::Rgb { pixels, .. } => pixels,
    }
}
