//! Depth-partitioned truncated SVD of the kernel matrices.
//!
//! Each component kernel `K_s` (M x N) is split along columns into one block per
//! depth layer. Every block is factorized as `K ~= U Q` where `U` holds the
//! leading left singular vectors and `Q = S V^T`, keeping only singular values
//! `>= epsilon_svd`. Mini-batch products then touch only the batch rows of `U`:
//!
//! * forward: `I_s = sum_h U_h[S, :] (Q_h kappa_h)`
//! * gradient: `G_s|_h = (d U_h[S, :]) Q_h D_h`, with `D_h` the band mask.

use std::path::Path;

use faer::Mat;

use crate::error::{Error, Result};
use crate::forward::{assemble_layer, KernelBlock};
use crate::geometry::{Grid3, MeasurementSet, Vec3};
use crate::io::{read_file, write_atomic, ByteReader, ByteWriter};
use crate::par;

pub const OPERATOR_MAGIC: &[u8; 4] = b"MKOP";
pub const OPERATOR_VERSION: u32 = 1;

/// Truncated factorization of one (component, layer) block.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankBlock {
    pub component: usize,
    pub layer: usize,
    pub rows: usize,
    pub cols: usize,
    /// Retained singular values, nonincreasing, all `>= epsilon_svd`.
    pub sigma: Vec<f64>,
    /// `rows x rank`, row-major, so that a measurement row is contiguous.
    pub u: Vec<f64>,
    /// `rank x cols`, row-major.
    pub q: Vec<f64>,
}

impl LowRankBlock {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    #[inline]
    fn u_row(&self, i: usize) -> &[f64] {
        let r = self.rank();
        &self.u[i * r..(i + 1) * r]
    }

    /// Dense `U Q`, row-major.
    pub fn reconstruct(&self) -> Vec<f64> {
        let r = self.rank();
        let mut out = vec![0.0; self.rows * self.cols];
        for i in 0..self.rows {
            let row = &mut out[i * self.cols..(i + 1) * self.cols];
            for t in 0..r {
                let a = self.u[i * r + t];
                let q = &self.q[t * self.cols..(t + 1) * self.cols];
                for (o, b) in row.iter_mut().zip(q) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn stored_len(&self) -> usize {
        self.rank() * (self.rows + self.cols)
    }
}

/// Truncated SVD of a dense block: keep every singular value `>= epsilon_svd`.
pub fn truncate_block(block: &KernelBlock, epsilon_svd: f64) -> Result<LowRankBlock> {
    let (m, n) = (block.rows, block.cols);
    let fail = || Error::Svd {
        component: block.component + 1,
        layer: block.layer + 1,
    };
    let a = Mat::<f64>::from_fn(m, n, |i, j| block.data[i * n + j]);
    let svd = a.thin_svd().map_err(|_| fail())?;
    let s = svd.S().column_vector();
    let all: Vec<f64> = (0..s.nrows()).map(|i| s[i]).collect();
    if all.iter().any(|v| !v.is_finite()) {
        return Err(fail());
    }
    let rank = all.iter().take_while(|v| **v >= epsilon_svd).count();
    let u_mat = svd.U();
    let v_mat = svd.V();
    let mut u = vec![0.0; m * rank];
    for i in 0..m {
        for t in 0..rank {
            u[i * rank + t] = u_mat[(i, t)];
        }
    }
    let mut q = vec![0.0; rank * n];
    for t in 0..rank {
        for j in 0..n {
            q[t * n + j] = all[t] * v_mat[(j, t)];
        }
    }
    Ok(LowRankBlock {
        component: block.component,
        layer: block.layer,
        rows: m,
        cols: n,
        sigma: all[..rank].to_vec(),
        u,
        q,
    })
}

/// The compressed kernel: `3 * nz` low-rank blocks ordered component-major.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelOperator {
    pub dims: [usize; 3],
    pub n_measurements: usize,
    pub epsilon_svd: f64,
    pub blocks: Vec<LowRankBlock>,
}

/// Per-component batch vectors, one entry per batch row (forward) or per node
/// (gradient).
pub type Components = [Vec<f64>; 3];

impl KernelOperator {
    pub fn n_layers(&self) -> usize {
        self.dims[2]
    }

    pub fn layer_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    pub fn n_nodes(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn block(&self, component: usize, layer: usize) -> &LowRankBlock {
        &self.blocks[component * self.n_layers() + layer]
    }

    pub fn ranks(&self) -> Vec<[usize; 3]> {
        (0..self.n_layers())
            .map(|h| [0, 1, 2].map(|s| self.block(s, h).rank()))
            .collect()
    }

    pub fn stored_len(&self) -> usize {
        self.blocks.iter().map(LowRankBlock::stored_len).sum()
    }

    /// Dense `3 M N` entries over stored entries.
    pub fn compression_ratio(&self) -> f64 {
        (3 * self.n_measurements * self.n_nodes()) as f64 / self.stored_len().max(1) as f64
    }

    /// Whether this operator was built for `grid` and `m` measurements.
    pub fn check_compatible(&self, grid: &Grid3, m: usize) -> Result<()> {
        if self.dims != grid.dims() {
            return Err(Error::DimensionMismatch {
                what: "operator grid nodes",
                expected: grid.n_nodes(),
                actual: self.n_nodes(),
            });
        }
        if self.n_measurements != m {
            return Err(Error::DimensionMismatch {
                what: "operator measurement count",
                expected: m,
                actual: self.n_measurements,
            });
        }
        Ok(())
    }

    fn check_rows(&self, rows: &[usize]) -> Result<()> {
        match rows.iter().find(|&&i| i >= self.n_measurements) {
            Some(&i) => Err(Error::IndexOutOfRange {
                index: i,
                len: self.n_measurements,
            }),
            None => Ok(()),
        }
    }

    /// Kernel-susceptibility products `I_s[r] = sum_j K_s(rows[r], j) kappa_j`
    /// for the batch rows, via the factorized blocks. Layers are accumulated in
    /// ascending order.
    pub fn batch_forward(&self, rows: &[usize], kappa: &[f64]) -> Result<Components> {
        self.check_rows(rows)?;
        if kappa.len() != self.n_nodes() {
            return Err(Error::DimensionMismatch {
                what: "susceptibility vector",
                expected: self.n_nodes(),
                actual: kappa.len(),
            });
        }
        let cols = self.layer_len();
        // Q_h kappa_h for every block: rank-sized vectors.
        let projected: Vec<Vec<f64>> = par::map_slice(&self.blocks, |b| {
            let kh = &kappa[b.layer * cols..(b.layer + 1) * cols];
            (0..b.rank())
                .map(|t| {
                    b.q[t * cols..(t + 1) * cols]
                        .iter()
                        .zip(kh)
                        .map(|(q, k)| q * k)
                        .sum()
                })
                .collect()
        });
        let nz = self.n_layers();
        let out = [0, 1, 2].map(|s| {
            par::map_slice(rows, |&i| {
                let mut acc = 0.0;
                for h in 0..nz {
                    let b = self.block(s, h);
                    let y = &projected[s * nz + h];
                    acc += b.u_row(i).iter().zip(y).map(|(u, y)| u * y).sum::<f64>();
                }
                acc
            })
        });
        Ok(out)
    }

    /// Row-weighted, band-masked kernel products
    /// `G_s[j] = mask_j * sum_r weights_s[r] K_s(rows[r], j)`.
    ///
    /// Per block the `1 x rank` vector `weights_s U_h[rows, :]` is formed first
    /// and then applied only to the band columns of `Q_h`.
    pub fn batch_gradient_rows(
        &self,
        rows: &[usize],
        weights: &[&[f64]; 3],
        band: &[bool],
    ) -> Result<Components> {
        self.check_rows(rows)?;
        for w in weights {
            if w.len() != rows.len() {
                return Err(Error::DimensionMismatch {
                    what: "gradient row weights",
                    expected: rows.len(),
                    actual: w.len(),
                });
            }
        }
        if band.len() != self.n_nodes() {
            return Err(Error::DimensionMismatch {
                what: "band mask",
                expected: self.n_nodes(),
                actual: band.len(),
            });
        }
        let cols = self.layer_len();
        let band_cols: Vec<Vec<usize>> = (0..self.n_layers())
            .map(|h| (0..cols).filter(|&j| band[h * cols + j]).collect())
            .collect();
        let per_block: Vec<Vec<f64>> = par::map_slice(&self.blocks, |b| {
            let mut layer_out = vec![0.0; cols];
            let active = &band_cols[b.layer];
            if active.is_empty() || b.rank() == 0 {
                return layer_out;
            }
            let r = b.rank();
            let w = weights[b.component];
            let mut wu = vec![0.0; r];
            for (k, &i) in rows.iter().enumerate() {
                let coef = w[k];
                for (acc, u) in wu.iter_mut().zip(b.u_row(i)) {
                    *acc += coef * u;
                }
            }
            for (t, c) in wu.iter().enumerate() {
                let q = &b.q[t * cols..(t + 1) * cols];
                for &j in active {
                    layer_out[j] += c * q[j];
                }
            }
            layer_out
        });
        let nz = self.n_layers();
        Ok([0, 1, 2].map(|s| {
            let mut g = Vec::with_capacity(self.n_nodes());
            for h in 0..nz {
                g.extend_from_slice(&per_block[s * nz + h]);
            }
            g
        }))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(OPERATOR_MAGIC);
        w.u32(OPERATOR_VERSION);
        w.u32(self.n_measurements as u32);
        w.u32(self.n_nodes() as u32);
        for d in self.dims {
            w.u32(d as u32);
        }
        w.f64(self.epsilon_svd);
        for b in &self.blocks {
            let r = b.rank();
            w.u8(b.component as u8 + 1);
            w.u32(b.layer as u32 + 1);
            w.u32(r as u32);
            for s in &b.sigma {
                w.f64(*s);
            }
            // U column-major on disk.
            for t in 0..r {
                for i in 0..b.rows {
                    w.f64(b.u[i * r + t]);
                }
            }
            for v in &b.q {
                w.f64(*v);
            }
        }
        w.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?, path)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::checked(bytes, path, OPERATOR_MAGIC)?;
        let bad = |msg: String| Error::format(path, msg);
        let version = r.u32()?;
        if version != OPERATOR_VERSION {
            return Err(bad(format!("unsupported operator version {version}")));
        }
        let m = r.u32()? as usize;
        let n = r.u32()? as usize;
        let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        if dims.iter().product::<usize>() != n || dims.iter().any(|d| *d < 2) || m == 0 {
            return Err(bad(format!(
                "inconsistent header: M={m}, N={n}, dims={dims:?}"
            )));
        }
        let epsilon_svd = r.f64()?;
        let cols = dims[0] * dims[1];
        let mut blocks = Vec::with_capacity(3 * dims[2]);
        for s in 0..3 {
            for h in 0..dims[2] {
                let (fs, fh) = (r.u8()? as usize, r.u32()? as usize);
                if fs != s + 1 || fh != h + 1 {
                    return Err(bad(format!(
                        "block out of order: found (s={fs}, h={fh}), expected (s={}, h={})",
                        s + 1,
                        h + 1
                    )));
                }
                let rank = r.u32()? as usize;
                if rank > m.min(cols) {
                    return Err(bad(format!(
                        "block (s={fs}, h={fh}) rank {rank} exceeds min(M, layer)"
                    )));
                }
                let sigma = r.f64s(rank)?;
                let u_cm = r.f64s(m * rank)?;
                let mut u = vec![0.0; m * rank];
                for t in 0..rank {
                    for i in 0..m {
                        u[i * rank + t] = u_cm[t * m + i];
                    }
                }
                let q = r.f64s(rank * cols)?;
                blocks.push(LowRankBlock {
                    component: s,
                    layer: h,
                    rows: m,
                    cols,
                    sigma,
                    u,
                    q,
                });
            }
        }
        if r.remaining() != 0 {
            return Err(Error::format(
                r.path(),
                format!("{} unexpected trailing bytes", r.remaining()),
            ));
        }
        Ok(KernelOperator {
            dims,
            n_measurements: m,
            epsilon_svd,
            blocks,
        })
    }
}

/// Factorize pre-assembled dense blocks (any order; all `3 * nz` required).
pub fn precondition(
    blocks: &[KernelBlock],
    grid: &Grid3,
    epsilon_svd: f64,
) -> Result<KernelOperator> {
    if !(epsilon_svd >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "epsilon_svd must be >= 0, got {epsilon_svd}"
        )));
    }
    let nz = grid.nz;
    if blocks.len() != 3 * nz {
        return Err(Error::DimensionMismatch {
            what: "kernel block count",
            expected: 3 * nz,
            actual: blocks.len(),
        });
    }
    let m = blocks[0].rows;
    let mut ordered: Vec<Option<&KernelBlock>> = vec![None; 3 * nz];
    for b in blocks {
        if b.rows != m || b.cols != grid.layer_len() || b.component > 2 || b.layer >= nz {
            return Err(Error::InvalidInput(format!(
                "block (s={}, h={}) has inconsistent shape {}x{}",
                b.component + 1,
                b.layer + 1,
                b.rows,
                b.cols
            )));
        }
        ordered[b.component * nz + b.layer] = Some(b);
    }
    if ordered.iter().any(Option::is_none) {
        return Err(Error::InvalidInput("missing kernel block".into()));
    }
    let factored = par::map_slice(&ordered, |b| truncate_block(b.unwrap(), epsilon_svd));
    Ok(KernelOperator {
        dims: grid.dims(),
        n_measurements: m,
        epsilon_svd,
        blocks: factored.into_iter().collect::<Result<_>>()?,
    })
}

/// Assemble and factorize layer by layer, holding at most one layer of dense
/// blocks per worker.
pub fn precondition_from_geometry(
    meas: &MeasurementSet,
    grid: &Grid3,
    b_hat: &Vec3,
    epsilon_svd: f64,
) -> Result<KernelOperator> {
    if !(epsilon_svd >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "epsilon_svd must be >= 0, got {epsilon_svd}"
        )));
    }
    let per_layer: Vec<Result<Vec<LowRankBlock>>> = par::map_range(grid.nz, |h| {
        assemble_layer(h, meas, grid, b_hat)?
            .iter()
            .map(|b| truncate_block(b, epsilon_svd))
            .collect()
    });
    let mut by_layer = Vec::with_capacity(grid.nz);
    for l in per_layer {
        by_layer.push(l?);
    }
    let mut blocks = Vec::with_capacity(3 * grid.nz);
    for s in 0..3 {
        for layer in &by_layer {
            blocks.push(layer[s].clone());
        }
    }
    Ok(KernelOperator {
        dims: grid.dims(),
        n_measurements: meas.len(),
        epsilon_svd,
        blocks,
    })
}
