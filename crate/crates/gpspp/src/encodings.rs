//! Structural, positional and 3D-derived features computed per graph.
//!
//! Everything here is pure in the graph (and, for the distance kernels, the
//! learnable kernel parameters): Laplacian eigen-features, random-walk
//! return probabilities, shortest-path-distance maps, degree centrality
//! buckets and the Gaussian kernel embedding of interatomic distances.
//! Molecules are small (tens of atoms), so dense O(N³) eigensolves and BFS
//! per node are the right tools.

use std::io::{Read, Write};
use std::path::Path;

use crate::diff::{Tape, Var};
use crate::graph::MolecularGraph;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Sizing knobs for the per-graph features.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodingConfig {
    /// Retained nontrivial Laplacian eigenpairs.
    pub k_lap: usize,
    /// Random-walk lengths 1..=k_rw.
    pub k_rw: usize,
    /// Shortest path distances are clamped here; one extra bucket marks
    /// unreachable pairs.
    pub max_spd: usize,
    /// Degrees are clamped to this bucket for the centrality embedding.
    pub max_degree: usize,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        EncodingConfig {
            k_lap: 7,
            k_rw: 16,
            max_spd: 20,
            max_degree: 16,
        }
    }
}

impl EncodingConfig {
    /// Bucket count for the SPD embedding: distances `0..=max_spd` plus the
    /// unreachable bucket.
    pub fn spd_buckets(&self) -> usize {
        self.max_spd + 2
    }

    pub fn unreachable_bucket(&self) -> usize {
        self.max_spd + 1
    }

    pub fn degree_buckets(&self) -> usize {
        self.max_degree + 1
    }
}

/// Laplacian eigen-features: rows of the retained eigenvectors and the
/// L2-normalised eigenvalue vector, truncated / zero-padded to `k_lap`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFeatures {
    /// `N x k_lap`; column `j` is the eigenvector of the `j`-th smallest
    /// nontrivial eigenvalue (sign fixed so its first nonzero entry is
    /// positive). Padding columns are exactly zero.
    pub eig_vectors: Tensor,
    /// `k_lap` entries, L2-normalised when nonzero; padding entries zero.
    pub eig_values: Vec<f64>,
}

/// Random-walk return probabilities `(P^s)_{ii}` for `s = 1..=k_rw`.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomWalkFeatures {
    /// `N x k_rw`.
    pub probs: Tensor,
}

/// Pairwise shortest path distances, clamped and bucketed for embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMap {
    pub n: usize,
    /// `N x N` bucket indices: `min(dist, max_spd)` for reachable pairs,
    /// `max_spd + 1` for unreachable ones.
    pub buckets: Vec<usize>,
    /// Raw BFS distances with `usize::MAX` marking unreachable pairs.
    pub dist: Vec<usize>,
}

impl SpdMap {
    pub fn bucket(&self, i: usize, j: usize) -> usize {
        self.buckets[i * self.n + j]
    }
}

/// All precomputed per-graph features consumed by the model encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphFeatures {
    pub spectral: SpectralFeatures,
    pub random_walk: RandomWalkFeatures,
    pub spd: SpdMap,
    /// Degree clamped to the centrality bucket cap.
    pub degree_buckets: Vec<usize>,
}

/// Undirected adjacency as a dense row-major 0/1 matrix.
fn adjacency(g: &MolecularGraph) -> Vec<f64> {
    let n = g.num_nodes;
    let mut a = vec![0.0; n * n];
    for &(u, v) in &g.edges {
        a[u * n + v] = 1.0;
    }
    a
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues in ascending order with matching eigenvectors as columns of
/// the second buffer (`vecs[r * n + c]` is entry `r` of eigenvector `c`).
pub fn symmetric_eigen(a: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
    let tol = 1e-15 * scale;

    for _sweep in 0..64 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[p * n + q] * m[p * n + q];
            }
        }
        if off.sqrt() <= tol {
            let mut pairs: Vec<(f64, usize)> =
                (0..n).map(|i| (m[i * n + i], i)).collect();
            pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite eigenvalues"));
            let vals: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let mut vecs = vec![0.0; n * n];
            for (c, &(_, src)) in pairs.iter().enumerate() {
                for r in 0..n {
                    vecs[r * n + c] = v[r * n + src];
                }
            }
            return Ok((vals, vecs));
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() <= tol / (n as f64) {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    Err(Error::Numeric("Jacobi eigensolver did not converge".into()))
}

/// Eigen-features of the graph Laplacian `L = D - A`: eigenpairs sorted
/// ascending, the first (trivial) pair excluded, the remainder truncated or
/// zero-padded to `k_lap`. Eigenvector signs are canonicalised so the first
/// entry above 1e-9 in magnitude is positive; training may re-randomise
/// them. The eigenvalue vector is L2-normalised when nonzero.
pub fn laplacian_features(g: &MolecularGraph, cfg: &EncodingConfig) -> Result<SpectralFeatures> {
    let n = g.num_nodes;
    let a = adjacency(g);
    let deg = g.degrees();
    let mut lap = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            lap[i * n + j] = if i == j { deg[i] as f64 } else { -a[i * n + j] };
        }
    }
    let (vals, vecs) = symmetric_eigen(&lap, n)?;

    let k = cfg.k_lap;
    let retained = (n - 1).min(k); // skip the first trivial eigenpair
    let mut eig_values = vec![0.0; k];
    let mut eig_vectors = Tensor::zeros(vec![n, k]);
    for (j, value) in eig_values.iter_mut().enumerate().take(retained) {
        let col = j + 1;
        *value = vals[col];
        let mut flip = 1.0;
        for r in 0..n {
            let e = vecs[r * n + col];
            if e.abs() > 1e-9 {
                flip = e.signum();
                break;
            }
        }
        for r in 0..n {
            eig_vectors.data_mut()[r * k + j] = flip * vecs[r * n + col];
        }
    }
    let norm = eig_values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in &mut eig_values {
            *v /= norm;
        }
    }
    Ok(SpectralFeatures {
        eig_vectors,
        eig_values,
    })
}

/// Return probabilities of random walks of length `1..=k_rw` under the
/// transition matrix `P = D⁻¹A`. Rows of degree-0 nodes are all zero, so an
/// isolated node's return probability is 0 at every length.
pub fn random_walk_features(g: &MolecularGraph, cfg: &EncodingConfig) -> RandomWalkFeatures {
    let n = g.num_nodes;
    let k = cfg.k_rw;
    let a = adjacency(g);
    let deg = g.degrees();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        if deg[i] == 0 {
            continue;
        }
        let inv = 1.0 / deg[i] as f64;
        for j in 0..n {
            p[i * n + j] = a[i * n + j] * inv;
        }
    }
    let mut probs = Tensor::zeros(vec![n, k]);
    let mut cur = p.clone();
    for s in 0..k {
        for i in 0..n {
            probs.data_mut()[i * k + s] = cur[i * n + i];
        }
        if s + 1 < k {
            let mut next = vec![0.0; n * n];
            for i in 0..n {
                for l in 0..n {
                    let c = cur[i * n + l];
                    if c == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        next[i * n + j] += c * p[l * n + j];
                    }
                }
            }
            cur = next;
        }
    }
    RandomWalkFeatures { probs }
}

/// All-pairs shortest path distances by BFS from every node, clamped to
/// `max_spd` with a dedicated bucket for unreachable pairs.
pub fn spd_map(g: &MolecularGraph, cfg: &EncodingConfig) -> SpdMap {
    let n = g.num_nodes;
    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(u, v) in &g.edges {
        neighbors[u].push(v);
    }
    let mut dist = vec![usize::MAX; n * n];
    let mut queue = std::collections::VecDeque::new();
    for src in 0..n {
        dist[src * n + src] = 0;
        queue.clear();
        queue.push_back(src);
        while let Some(u) = queue.pop_front() {
            let du = dist[src * n + u];
            for &v in &neighbors[u] {
                if dist[src * n + v] == usize::MAX {
                    dist[src * n + v] = du + 1;
                    queue.push_back(v);
                }
            }
        }
    }
    let buckets = dist
        .iter()
        .map(|&d| {
            if d == usize::MAX {
                cfg.unreachable_bucket()
            } else {
                d.min(cfg.max_spd)
            }
        })
        .collect();
    SpdMap { n, buckets, dist }
}

/// Per-node degree clamped to the centrality embedding cap.
pub fn degree_centrality(g: &MolecularGraph, cfg: &EncodingConfig) -> Vec<usize> {
    g.degrees().iter().map(|&d| d.min(cfg.max_degree)).collect()
}

/// Compute every precomputable feature for one graph.
pub fn featurize_graph(g: &MolecularGraph, cfg: &EncodingConfig) -> Result<GraphFeatures> {
    Ok(GraphFeatures {
        spectral: laplacian_features(g, cfg)?,
        random_walk: random_walk_features(g, cfg),
        spd: spd_map(g, cfg),
        degree_buckets: degree_centrality(g, cfg),
    })
}

pub fn featurize_dataset(graphs: &[MolecularGraph], cfg: &EncodingConfig) -> Result<Vec<GraphFeatures>> {
    graphs
        .iter()
        .enumerate()
        .map(|(i, g)| {
            featurize_graph(g, cfg).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("graph {i}: {msg}")),
                other => other,
            })
        })
        .collect()
}

/// Gaussian kernel embedding of a distance matrix.
///
/// Given distances `(n, n)` (a tape constant or a differentiable node) and
/// learnable kernel locations `mu` / widths `sigma` of length `K`, produces
/// the `(n*n, K)` tensor
/// `psi[ij, k] = -exp(-((d_ij - mu_k) / |sigma_k|)² / 2) / (sqrt(2π) |sigma_k|)`,
/// differentiable in the distances and both kernel parameter vectors.
/// `|sigma|` is clamped below at 1e-3 so learned widths cannot blow the
/// kernel up.
pub const SIGMA_FLOOR: f64 = 1e-3;

pub fn distance_kernels(tape: &mut Tape, dist: Var, mu: Var, sigma: Var) -> Result<Var> {
    let shape = tape.shape(dist).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::shape(
            "distance_kernels",
            format!("expected square distance matrix, got {shape:?}"),
        ));
    }
    let n2 = shape[0] * shape[1];
    let k = tape.shape(mu)[0];
    if tape.shape(sigma) != [k] {
        return Err(Error::shape(
            "distance_kernels",
            format!("mu {:?} vs sigma {:?}", tape.shape(mu), tape.shape(sigma)),
        ));
    }
    if !tape.value(dist).all_finite() {
        return Err(Error::Numeric("non-finite distances".into()));
    }

    let flat = tape.reshape(dist, vec![n2])?;
    let d = tape.broadcast_col(flat, k)?; // (n², K)
    let mu_b = tape.broadcast_row(mu, n2)?;
    let sig_abs = tape.abs(sigma);
    let sig_clamped = tape.clamp_min(sig_abs, SIGMA_FLOOR);
    let sig_b = tape.broadcast_row(sig_clamped, n2)?;

    let centered = tape.sub(d, mu_b)?;
    let scaled = tape.div(centered, sig_b)?;
    let sq = tape.mul(scaled, scaled)?;
    let half = tape.scale(sq, -0.5);
    let gauss = tape.exp(half);
    let num = tape.scale(gauss, -1.0 / (std::f64::consts::TAU).sqrt());
    tape.div(num, sig_b)
}

// --- feature sidecar file ----------------------------------------------

const SIDECAR_MAGIC: &[u8; 4] = b"GPSF";
const SIDECAR_VERSION: u32 = 1;

/// Write precomputed features as a little-endian binary sidecar.
///
/// Layout: magic `GPSF`, version u32, `k_lap/k_rw/max_spd/max_degree` u32
/// each, graph count u64; then per graph: `n` u32, eigenvector matrix
/// (`n*k_lap` f64), eigenvalues (`k_lap` f64), random walks (`n*k_rw` f64),
/// degree buckets (`n` u32), raw SPD distances (`n*n` u16, `0xFFFF` marks
/// unreachable pairs).
pub fn save_features(
    path: impl AsRef<Path>,
    cfg: &EncodingConfig,
    feats: &[GraphFeatures],
) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(SIDECAR_MAGIC);
    out.extend_from_slice(&SIDECAR_VERSION.to_le_bytes());
    for v in [cfg.k_lap, cfg.k_rw, cfg.max_spd, cfg.max_degree] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(feats.len() as u64).to_le_bytes());
    for f in feats {
        let n = f.spd.n;
        out.extend_from_slice(&(n as u32).to_le_bytes());
        for &v in f.spectral.eig_vectors.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in &f.spectral.eig_values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in f.random_walk.probs.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &d in &f.degree_buckets {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &d in &f.spd.dist {
            let enc: u16 = if d == usize::MAX { u16::MAX } else { d.min(u16::MAX as usize - 1) as u16 };
            out.extend_from_slice(&enc.to_le_bytes());
        }
    }
    std::fs::File::create(path.as_ref())?.write_all(&out)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("sidecar truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_features(path: impl AsRef<Path>) -> Result<(EncodingConfig, Vec<GraphFeatures>)> {
    let mut buf = Vec::new();
    std::fs::File::open(path.as_ref())?.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4)? != SIDECAR_MAGIC {
        return Err(Error::Checkpoint("bad sidecar magic".into()));
    }
    let version = c.u32()?;
    if version != SIDECAR_VERSION {
        return Err(Error::Checkpoint(format!("unsupported sidecar version {version}")));
    }
    let cfg = EncodingConfig {
        k_lap: c.u32()? as usize,
        k_rw: c.u32()? as usize,
        max_spd: c.u32()? as usize,
        max_degree: c.u32()? as usize,
    };
    let count = c.u64()? as usize;
    let mut feats = Vec::with_capacity(count);
    for _ in 0..count {
        let n = c.u32()? as usize;
        let mut vec_data = vec![0.0; n * cfg.k_lap];
        for v in &mut vec_data {
            *v = c.f64()?;
        }
        let mut eig_values = vec![0.0; cfg.k_lap];
        for v in &mut eig_values {
            *v = c.f64()?;
        }
        let mut rw = vec![0.0; n * cfg.k_rw];
        for v in &mut rw {
            *v = c.f64()?;
        }
        let mut degree_buckets = vec![0usize; n];
        for v in &mut degree_buckets {
            *v = c.u32()? as usize;
        }
        let mut dist = vec![0usize; n * n];
        for v in &mut dist {
            let enc = c.u16()?;
            *v = if enc == u16::MAX { usize::MAX } else { enc as usize };
        }
        let buckets = dist
            .iter()
            .map(|&d| {
                if d == usize::MAX {
                    cfg.unreachable_bucket()
                } else {
                    d.min(cfg.max_spd)
                }
            })
            .collect();
        feats.push(GraphFeatures {
            spectral: SpectralFeatures {
                eig_vectors: Tensor::new(vec![n, cfg.k_lap], vec_data)?,
                eig_values,
            },
            random_walk: RandomWalkFeatures {
                probs: Tensor::new(vec![n, cfg.k_rw], rw)?,
            },
            spd: SpdMap { n, buckets, dist },
            degree_buckets,
        });
    }
    Ok((cfg, feats))
}
