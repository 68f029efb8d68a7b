//! Sparsifying transform for the classical solver: orthonormal 2-D DCT-II
//! on square blocks, acting on flattened length-n vectors.

use crate::error::{CsError, Result};
use crate::tensor::{shape_str, Tensor};

/// Analysis/synthesis pair. `Identity` is the D = I case used by the sparse
/// recovery benchmarks; `Dct2` is the block transform for natural images.
#[derive(Debug, Clone)]
pub enum TransformD {
    Identity {
        n: usize,
    },
    Dct2 {
        /// Block edge length; vectors have length size².
        size: usize,
        /// Orthonormal 1-D DCT-II matrix, row-major [size × size].
        c: Vec<f64>,
    },
}

impl TransformD {
    pub fn identity(n: usize) -> Self {
        TransformD::Identity { n }
    }

    /// Orthonormal DCT-II on size×size blocks:
    /// C[k][j] = w(k)·sqrt(2/N)·cos(π(2j+1)k/(2N)), w(0)=1/sqrt(2), else 1.
    pub fn dct2(size: usize) -> Self {
        let n = size as f64;
        let mut c = vec![0.0; size * size];
        for k in 0..size {
            let w = if k == 0 { (0.5_f64).sqrt() } else { 1.0 };
            for j in 0..size {
                c[k * size + j] = w
                    * (2.0 / n).sqrt()
                    * (std::f64::consts::PI * (2 * j + 1) as f64 * k as f64 / (2.0 * n)).cos();
            }
        }
        TransformD::Dct2 { size, c }
    }

    /// Length of the flattened vectors this transform acts on.
    pub fn n(&self) -> usize {
        match self {
            TransformD::Identity { n } => *n,
            TransformD::Dct2 { size, .. } => size * size,
        }
    }

    /// Forward transform s = D x, batched over rows for 2-D input.
    pub fn analysis(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, false)
    }

    /// Inverse transform x = Dᵀ s; exact inverse by orthonormality.
    pub fn synthesis(&self, s: &Tensor) -> Result<Tensor> {
        self.apply(s, true)
    }

    fn apply(&self, x: &Tensor, inverse: bool) -> Result<Tensor> {
        let (rows, n) = match x.shape() {
            [n] => (1, *n),
            [b, n] => (*b, *n),
            s => {
                return Err(CsError::dimension(format!(
                    "transform expects 1-D or 2-D input, got {}",
                    shape_str(s)
                )))
            }
        };
        if n != self.n() {
            return Err(CsError::dimension(format!(
                "transform acts on length {}, input rows have {}",
                self.n(),
                n
            )));
        }
        match self {
            TransformD::Identity { .. } => Ok(x.clone()),
            TransformD::Dct2 { size, c } => {
                let sz = *size;
                let mut out = vec![0.0; rows * n];
                let mut tmp = vec![0.0; n];
                for r in 0..rows {
                    let block = &x.data()[r * n..(r + 1) * n];
                    // Rows first: tmp = C·X (or Cᵀ·X for the inverse).
                    for i in 0..sz {
                        for j in 0..sz {
                            let mut acc = 0.0;
                            for k in 0..sz {
                                let cv = if inverse { c[k * sz + i] } else { c[i * sz + k] };
                                acc += cv * block[k * sz + j];
                            }
                            tmp[i * sz + j] = acc;
                        }
                    }
                    // Columns second: out = tmp·Cᵀ (or tmp·C).
                    let dst = &mut out[r * n..(r + 1) * n];
                    for i in 0..sz {
                        for j in 0..sz {
                            let mut acc = 0.0;
                            for k in 0..sz {
                                let cv = if inverse { c[k * sz + j] } else { c[j * sz + k] };
                                acc += tmp[i * sz + k] * cv;
                            }
                            dst[i * sz + j] = acc;
                        }
                    }
                }
                Tensor::from_vec(x.shape(), out)
            }
        }
    }
}
