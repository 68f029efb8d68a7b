//! Block-based sensing: image partitioning, luminance extraction, Gaussian
//! sensing matrices, and the measurement operator y = Φx.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{CsError, Result};
use crate::kernels;
use crate::params::gaussian_tensor;
use crate::tensor::{shape_str, Tensor};

/// Block edge length for natural-image sensing.
pub const BLOCK_SIZE: usize = 33;
/// Flattened block length.
pub const BLOCK_LEN: usize = BLOCK_SIZE * BLOCK_SIZE;

/// A fixed sensing matrix with its sampling geometry.
#[derive(Debug, Clone)]
pub struct SensingSystem {
    pub n_p: usize,
    pub ratio: f64,
    pub m_p: usize,
    /// [m_p × n_p].
    pub phi: Tensor,
    pub seed: u64,
}

/// Measurement count for a sampling ratio: round(ratio·n_p), at least 1.
pub fn measurement_count(ratio: f64, n_p: usize) -> Result<usize> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(CsError::parameter(format!(
            "sampling ratio must lie in (0, 1], got {ratio}"
        )));
    }
    if n_p == 0 {
        return Err(CsError::parameter("block length must be positive"));
    }
    Ok(((ratio * n_p as f64).round() as usize).clamp(1, n_p))
}

/// i.i.d. Gaussian sensing matrix, mean 0 variance 1/m_p, deterministic for
/// a fixed seed.
pub fn make_gaussian_phi(ratio: f64, n_p: usize, seed: u64) -> Result<SensingSystem> {
    let m_p = measurement_count(ratio, n_p)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let phi = gaussian_tensor(&mut rng, &[m_p, n_p], 1.0 / (m_p as f64).sqrt());
    Ok(SensingSystem {
        n_p,
        ratio,
        m_p,
        phi,
        seed,
    })
}

impl SensingSystem {
    /// Wrap an explicit matrix; shape fixes (m_p, n_p).
    pub fn with_phi(phi: Tensor, ratio: f64, seed: u64) -> Result<Self> {
        match phi.shape() {
            [m, n] if *m >= 1 && *m <= *n => Ok(SensingSystem {
                n_p: *n,
                ratio,
                m_p: *m,
                phi,
                seed,
            }),
            s => Err(CsError::dimension(format!(
                "sensing matrix must be [m × n] with m ≤ n, got {}",
                shape_str(s)
            ))),
        }
    }

    /// y = Φx for a single block [n_p] or a batch [B × n_p].
    pub fn measure(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, one_d) = match x.shape() {
            [n] => (1, *n, true),
            [b, n] => (*b, *n, false),
            s => {
                return Err(CsError::dimension(format!(
                    "measure expects 1-D or 2-D input, got {}",
                    shape_str(s)
                )))
            }
        };
        if n != self.n_p {
            return Err(CsError::dimension(format!(
                "measure: block length {} does not match sensing dimension {}",
                n, self.n_p
            )));
        }
        let y = kernels::mat_bt(x.data(), self.phi.data(), b, self.n_p, self.m_p);
        let shape = if one_d {
            vec![self.m_p]
        } else {
            vec![b, self.m_p]
        };
        Tensor::from_vec(&shape, y)
    }
}

/// Geometry of one partitioned image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockGrid {
    pub height: usize,
    pub width: usize,
    pub block: usize,
    pub blocks_y: usize,
    pub blocks_x: usize,
}

impl BlockGrid {
    pub fn block_count(&self) -> usize {
        self.blocks_y * self.blocks_x
    }
}

/// Split an [H × W] image into flattened block rows, padding to block
/// multiples by edge replication. Blocks run row-major from the top left.
pub fn partition_blocks(img: &Tensor, block: usize) -> Result<(Tensor, BlockGrid)> {
    let (h, w) = match img.shape() {
        [h, w] if *h >= 1 && *w >= 1 => (*h, *w),
        s => {
            return Err(CsError::dimension(format!(
                "partition expects a nonempty 2-D image, got {}",
                shape_str(s)
            )))
        }
    };
    if block == 0 {
        return Err(CsError::parameter("block size must be positive"));
    }
    let blocks_y = h.div_ceil(block);
    let blocks_x = w.div_ceil(block);
    let grid = BlockGrid {
        height: h,
        width: w,
        block,
        blocks_y,
        blocks_x,
    };
    let n = block * block;
    let mut out = vec![0.0; grid.block_count() * n];
    let src = img.data();
    for by in 0..blocks_y {
        for bx in 0..blocks_x {
            let dst = &mut out[(by * blocks_x + bx) * n..(by * blocks_x + bx + 1) * n];
            for r in 0..block {
                let sy = (by * block + r).min(h - 1);
                for c in 0..block {
                    let sx = (bx * block + c).min(w - 1);
                    dst[r * block + c] = src[sy * w + sx];
                }
            }
        }
    }
    Ok((Tensor::from_vec(&[grid.block_count(), n], out)?, grid))
}

/// Exact inverse of [`partition_blocks`] on the unpadded extent.
pub fn reassemble(blocks: &Tensor, grid: &BlockGrid) -> Result<Tensor> {
    let n = grid.block * grid.block;
    let expect = [grid.block_count(), n];
    if blocks.shape() != expect {
        return Err(CsError::dimension(format!(
            "reassemble: got blocks {}, grid needs {}",
            shape_str(blocks.shape()),
            shape_str(&expect)
        )));
    }
    let mut out = vec![0.0; grid.height * grid.width];
    let src = blocks.data();
    for by in 0..grid.blocks_y {
        for bx in 0..grid.blocks_x {
            let blk = &src[(by * grid.blocks_x + bx) * n..(by * grid.blocks_x + bx + 1) * n];
            for r in 0..grid.block {
                let y = by * grid.block + r;
                if y >= grid.height {
                    break;
                }
                for c in 0..grid.block {
                    let x = bx * grid.block + c;
                    if x >= grid.width {
                        break;
                    }
                    out[y * grid.width + x] = blk[r * grid.block + c];
                }
            }
        }
    }
    Tensor::from_vec(&[grid.height, grid.width], out)
}

/// ITU-R BT.601 luma: 0.299R + 0.587G + 0.114B.
pub fn luminance(rgb: &Tensor) -> Result<Tensor> {
    let (h, w) = match rgb.shape() {
        [3, h, w] => (*h, *w),
        s => {
            return Err(CsError::dimension(format!(
                "luminance expects [3 × H × W], got {}",
                shape_str(s)
            )))
        }
    };
    let d = rgb.data();
    let plane = h * w;
    let out: Vec<f64> = (0..plane)
        .map(|i| 0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i])
        .collect();
    Tensor::from_vec(&[h, w], out)
}
