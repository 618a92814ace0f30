//! Sampling, neighborhood search and the set conv / set upconv operators.

use std::cmp::Ordering;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::{Transform4, Vec3};
use crate::nn::Mlp;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Point coordinates in meters with optional per-point features.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    coords: Tensor,
    features: Option<Tensor>,
}

impl PointCloud {
    pub fn new(coords: Tensor, features: Option<Tensor>) -> Result<Self> {
        if coords.rank() != 2 || coords.shape()[1] != 3 {
            return Err(Error::Invalid(format!("coords must be n×3, got {:?}", coords.shape())));
        }
        if !coords.all_finite() {
            return Err(Error::Invalid("non-finite coordinate".into()));
        }
        if let Some(f) = &features {
            if f.rank() != 2 || f.shape()[0] != coords.shape()[0] {
                return Err(Error::shape("point features", f.shape(), coords.shape()));
            }
        }
        Ok(PointCloud { coords, features })
    }

    pub fn from_points(points: &[Vec3]) -> Self {
        PointCloud {
            coords: Tensor::from_rows(points),
            features: None,
        }
    }

    pub fn empty() -> Self {
        PointCloud {
            coords: Tensor::zeros(&[0, 3]),
            features: None,
        }
    }

    pub fn len(&self) -> usize {
        self.coords.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coords(&self) -> &Tensor {
        &self.coords
    }

    pub fn features(&self) -> Option<&Tensor> {
        self.features.as_ref()
    }

    pub fn point(&self, i: usize) -> Vec3 {
        let r = self.coords.row(i);
        [r[0], r[1], r[2]]
    }

    pub fn points(&self) -> impl Iterator<Item = Vec3> + '_ {
        self.coords.data().chunks_exact(3).map(|r| [r[0], r[1], r[2]])
    }

    /// Applies `f` to every coordinate; features are carried unchanged.
    pub fn map_points(&self, f: impl Fn(Vec3) -> Vec3) -> PointCloud {
        let pts: Vec<Vec3> = self.points().map(f).collect();
        PointCloud {
            coords: Tensor::from_rows(&pts),
            features: self.features.clone(),
        }
    }

    pub fn transform(&self, t: &Transform4) -> PointCloud {
        self.map_points(|p| t.transform_point(p))
    }

    /// Keeps the rows listed in `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> PointCloud {
        let pts: Vec<Vec3> = idx.iter().map(|&i| self.point(i)).collect();
        let features = self.features.as_ref().map(|f| {
            let w = f.shape()[1];
            let data = idx.iter().flat_map(|&i| f.row(i).iter().copied()).collect();
            Tensor::new(vec![idx.len(), w], data).expect("row selection")
        });
        PointCloud {
            coords: Tensor::from_rows(&pts),
            features,
        }
    }
}

/// Row indices into a reference cloud, `k` per query, each row sorted by
/// ascending distance with ties broken by ascending index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborIndex {
    pub k: usize,
    pub indices: Vec<usize>,
}

impl NeighborIndex {
    pub fn rows(&self) -> usize {
        self.indices.len().checked_div(self.k).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FpsStart {
    /// Start from row 0.
    First,
    /// Start from a row drawn with the given seed.
    Seeded(u64),
}

#[inline]
fn dist2(a: &[f64], b: &[f64]) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

fn check_coords(t: &Tensor, what: &str) -> Result<usize> {
    if t.rank() != 2 || t.shape()[1] != 3 {
        return Err(Error::Invalid(format!("{what}: coords must be n×3, got {:?}", t.shape())));
    }
    Ok(t.shape()[0])
}

/// Greedy max-min subset of `m` rows of `coords: [n,3]`.
pub fn farthest_point_sample(coords: &Tensor, m: usize, start: FpsStart) -> Result<Vec<usize>> {
    let n = check_coords(coords, "farthest_point_sample")?;
    if m == 0 || m > n {
        return Err(Error::Invalid(format!("farthest_point_sample: need 1 ≤ m ≤ {n}, got m = {m}")));
    }
    let d = coords.data();
    let first = match start {
        FpsStart::First => 0,
        FpsStart::Seeded(s) => ChaCha8Rng::seed_from_u64(s).random_range(0..n),
    };
    let mut chosen = Vec::with_capacity(m);
    let mut min_d = vec![f64::INFINITY; n];
    let mut cur = first;
    for _ in 0..m {
        chosen.push(cur);
        min_d[cur] = f64::NEG_INFINITY;
        let c = &d[cur * 3..cur * 3 + 3];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for j in 0..n {
            if min_d[j] == f64::NEG_INFINITY {
                continue;
            }
            let dj = dist2(&d[j * 3..j * 3 + 3], c);
            if dj < min_d[j] {
                min_d[j] = dj;
            }
            if min_d[j] > best_d {
                best_d = min_d[j];
                best = j;
            }
        }
        cur = best;
    }
    Ok(chosen)
}

/// Exact `k` nearest rows of `reference` for each row of `query`.
pub fn knn(query: &Tensor, reference: &Tensor, k: usize) -> Result<NeighborIndex> {
    let m = check_coords(query, "knn query")?;
    let n = check_coords(reference, "knn reference")?;
    if k == 0 || k > n {
        return Err(Error::Invalid(format!("knn: need 1 ≤ k ≤ {n}, got k = {k}")));
    }
    let (qd, rd) = (query.data(), reference.data());
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1));
    let mut indices = Vec::with_capacity(m * k);
    let mut buf: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..m {
        let q = &qd[i * 3..i * 3 + 3];
        buf.clear();
        buf.extend((0..n).map(|j| (dist2(q, &rd[j * 3..j * 3 + 3]), j)));
        if k < n {
            buf.select_nth_unstable_by(k - 1, cmp);
            buf.truncate(k);
        }
        buf.sort_unstable_by(cmp);
        indices.extend(buf.iter().map(|&(_, j)| j));
    }
    Ok(NeighborIndex { k, indices })
}

/// `n` rows drawn without replacement, or with replacement when the cloud
/// has fewer than `n` points.
pub fn random_sample(pc: &PointCloud, n: usize, seed: u64) -> Result<PointCloud> {
    if pc.is_empty() {
        return Err(Error::Invalid("random_sample: empty cloud".into()));
    }
    if n == 0 {
        return Err(Error::Invalid("random_sample: n must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = if pc.len() >= n {
        index::sample(&mut rng, pc.len(), n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..pc.len())).collect()
    };
    Ok(pc.select(&idx))
}

/// Coordinates and optional features of a point set recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct PointSet {
    pub coords: Var,
    pub features: Option<Var>,
}

impl PointSet {
    pub fn len(&self, tape: &Tape) -> usize {
        tape.shape(self.coords)[0]
    }

    pub fn is_empty(&self, tape: &Tape) -> bool {
        self.len(tape) == 0
    }
}

fn repeat_each(idx: impl IntoIterator<Item = usize>, k: usize) -> Vec<usize> {
    idx.into_iter().flat_map(|i| std::iter::repeat_n(i, k)).collect()
}

/// Input width a set conv MLP needs for features of width `c`.
pub fn set_conv_in_width(c: usize) -> usize {
    3 + 2 * c
}

/// Samples `m` centers by FPS, then aggregates as in [`set_conv_at`].
pub fn set_conv(
    tape: &mut Tape,
    store: &ParamStore,
    input: &PointSet,
    m: usize,
    k: usize,
    mlp: &Mlp,
    start: FpsStart,
) -> Result<(PointSet, Vec<usize>)> {
    let centers = farthest_point_sample(tape.value(input.coords), m, start)?;
    let out = set_conv_at(tape, store, input, &centers, k, mlp)?;
    Ok((out, centers))
}

/// For each center row `i`: `max_k MLP((x_k − x_i) ⊕ f_k ⊕ f_i)` over its
/// `k` nearest input points. Returns the centers with their new features.
pub fn set_conv_at(
    tape: &mut Tape,
    store: &ParamStore,
    input: &PointSet,
    centers: &[usize],
    k: usize,
    mlp: &Mlp,
) -> Result<PointSet> {
    let c = input.features.map_or(0, |f| tape.shape(f)[1]);
    if mlp.in_width() != set_conv_in_width(c) {
        return Err(Error::Invalid(format!(
            "set conv: {} expects width {}, constructed input has {}",
            mlp.name,
            mlp.in_width(),
            set_conv_in_width(c)
        )));
    }
    let m = centers.len();
    let center_xyz = tape.gather_rows(input.coords, centers)?;
    let nbrs = knn(tape.value(center_xyz), tape.value(input.coords), k)?;
    let rep = repeat_each(centers.iter().copied(), k);
    let nx = tape.gather_rows(input.coords, &nbrs.indices)?;
    let cx = tape.gather_rows(input.coords, &rep)?;
    let rel = tape.sub(nx, cx)?;
    let grouped = match input.features {
        Some(f) => {
            let fk = tape.gather_rows(f, &nbrs.indices)?;
            let fc = tape.gather_rows(f, &rep)?;
            tape.concat(&[rel, fk, fc], 1)?
        }
        None => rel,
    };
    let h = mlp.forward(tape, store, grouped)?;
    let h = tape.reshape(h, &[m, k, mlp.out_width()])?;
    let pooled = tape.max(h, 1)?;
    Ok(PointSet {
        coords: center_xyz,
        features: Some(pooled),
    })
}

/// Propagates `sparse` features onto `dense` points.
///
/// Each dense point max-pools `mlp1((y_k − x_i) ⊕ g_k)` over its `k` nearest
/// sparse points; the result is concatenated with the dense point's own
/// features (when present) and passed through `mlp2` (when given).
pub fn set_upconv(
    tape: &mut Tape,
    store: &ParamStore,
    dense: &PointSet,
    sparse: &PointSet,
    k: usize,
    mlp1: &Mlp,
    mlp2: Option<&Mlp>,
) -> Result<Var> {
    let sf = sparse
        .features
        .ok_or_else(|| Error::Invalid("set upconv: sparse features required".into()))?;
    let c = tape.shape(sf)[1];
    if mlp1.in_width() != 3 + c {
        return Err(Error::Invalid(format!(
            "set upconv: {} expects width {}, constructed input has {}",
            mlp1.name,
            mlp1.in_width(),
            3 + c
        )));
    }
    let n = dense.len(tape);
    let nbrs = knn(tape.value(dense.coords), tape.value(sparse.coords), k)?;
    let rep = repeat_each(0..n, k);
    let ny = tape.gather_rows(sparse.coords, &nbrs.indices)?;
    let cx = tape.gather_rows(dense.coords, &rep)?;
    let rel = tape.sub(ny, cx)?;
    let g = tape.gather_rows(sf, &nbrs.indices)?;
    let grouped = tape.concat(&[rel, g], 1)?;
    let h = mlp1.forward(tape, store, grouped)?;
    let h = tape.reshape(h, &[n, k, mlp1.out_width()])?;
    let mut out = tape.max(h, 1)?;
    if let Some(df) = dense.features {
        out = tape.concat(&[out, df], 1)?;
    }
    match mlp2 {
        Some(mlp) => mlp.forward(tape, store, out),
        None => Ok(out),
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::tensor::{check_param_gradients, FdOptions};

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Tensor {
        let pts: Vec<Vec3> = (0..n)
            .map(|_| {
                [
                    rng.random_range(-scale..scale),
                    rng.random_range(-scale..scale),
                    rng.random_range(-scale..scale),
                ]
            })
            .collect();
        Tensor::from_rows(&pts)
    }

    fn random_features(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Tensor {
        Tensor::new(vec![n, c], (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Full sort of every reference row by (distance, index).
    fn brute_knn(q: &Tensor, r: &Tensor, k: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for i in 0..q.shape()[0] {
            let mut all: Vec<(f64, usize)> = (0..r.shape()[0]).map(|j| (dist2(q.row(i), r.row(j)), j)).collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            out.extend(all[..k].iter().map(|p| p.1));
        }
        out
    }

    /// Recomputes each candidate's distance to the whole chosen set at every step.
    fn greedy_fps(x: &Tensor, m: usize) -> Vec<usize> {
        let n = x.shape()[0];
        let mut chosen = vec![0usize];
        while chosen.len() < m {
            let mut best = None;
            let mut best_d = -1.0;
            for j in 0..n {
                if chosen.contains(&j) {
                    continue;
                }
                let d = chosen.iter().map(|&c| dist2(x.row(j), x.row(c))).fold(f64::INFINITY, f64::min);
                if d > best_d {
                    best_d = d;
                    best = Some(j);
                }
            }
            chosen.push(best.unwrap());
        }
        chosen
    }

    fn coverage(x: &Tensor, chosen: &[usize]) -> f64 {
        (0..x.shape()[0])
            .map(|j| chosen.iter().map(|&c| dist2(x.row(j), x.row(c))).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    }

    #[test]
    fn fps_examples() {
        let square = Tensor::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]]);
        assert_eq!(farthest_point_sample(&square, 2, FpsStart::First).unwrap(), vec![0, 2]);
        let line = Tensor::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [10.0, 0.0, 0.0]]);
        assert_eq!(farthest_point_sample(&line, 2, FpsStart::First).unwrap(), vec![0, 2]);

        let mut all = farthest_point_sample(&square, 4, FpsStart::First).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(farthest_point_sample(&square, 5, FpsStart::First).is_err());
        assert!(farthest_point_sample(&square, 0, FpsStart::First).is_err());
    }

    #[test]
    fn fps_with_duplicates_is_a_permutation() {
        let dup = Tensor::from_rows(&[[1.0, 1.0, 1.0]; 5]);
        let mut all = farthest_point_sample(&dup, 5, FpsStart::Seeded(3)).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn fps_seeded_start_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_cloud(&mut rng, 50, 1.0);
        let a = farthest_point_sample(&x, 10, FpsStart::Seeded(9)).unwrap();
        let b = farthest_point_sample(&x, 10, FpsStart::Seeded(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn knn_examples() {
        let r = Tensor::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        let q = Tensor::from_rows(&[[1.0, 0.0, 0.0]]);
        assert_eq!(knn(&q, &r, 1).unwrap().indices, vec![1]);
        assert_eq!(knn(&q, &r, 3).unwrap().indices, vec![1, 0, 2]);
        // equidistant neighbors resolve by index
        let q = Tensor::from_rows(&[[0.5, 0.0, 0.0]]);
        assert_eq!(knn(&q, &r, 2).unwrap().indices, vec![0, 1]);
        assert!(knn(&q, &r, 4).is_err());
    }

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let q = random_cloud(&mut rng, 64, 2.0);
            let r = random_cloud(&mut rng, 64, 2.0);
            let k = rng.random_range(1..=64);
            assert_eq!(knn(&q, &r, k).unwrap().indices, brute_knn(&q, &r, k));
        }
    }

    #[test]
    fn fps_matches_greedy_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let n = rng.random_range(1..=64);
            let x = random_cloud(&mut rng, n, 1.0);
            let m = rng.random_range(1..=n);
            assert_eq!(farthest_point_sample(&x, m, FpsStart::First).unwrap(), greedy_fps(&x, m));
        }
    }

    #[test]
    fn fps_coverage_shrinks_with_m() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = random_cloud(&mut rng, 60, 1.0);
        let mut prev = f64::INFINITY;
        for m in 1..=60 {
            let c = coverage(&x, &farthest_point_sample(&x, m, FpsStart::First).unwrap());
            assert!(c <= prev);
            prev = c;
        }
    }

    #[test]
    fn random_sample_examples() {
        let pc = PointCloud::from_points(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let up = random_sample(&pc, 8, 1).unwrap();
        assert_eq!(up.len(), 8);
        assert!(up.points().all(|p| pc.points().any(|q| q == p)));

        let same = random_sample(&pc, 3, 5).unwrap();
        let mut xs: Vec<f64> = same.points().map(|p| p[0]).collect();
        xs.sort_by(f64::total_cmp);
        assert_eq!(xs, vec![0.0, 1.0, 2.0]);

        assert_eq!(random_sample(&pc, 2, 7).unwrap(), random_sample(&pc, 2, 7).unwrap());
        assert!(random_sample(&PointCloud::empty(), 2, 0).is_err());
    }

    fn conv_fixture(n: usize, c: usize, seed: u64) -> (ParamStore, Mlp, Tensor, Option<Tensor>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, &mut rng, "sc", set_conv_in_width(c), &[6, 5], true).unwrap();
        let x = random_cloud(&mut rng, n, 1.0);
        let f = (c > 0).then(|| random_features(&mut rng, n, c));
        (store, mlp, x, f)
    }

    fn run_conv(store: &ParamStore, mlp: &Mlp, x: &Tensor, f: Option<&Tensor>, centers: &[usize], k: usize) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let input = PointSet {
            coords: tape.constant(x.clone()),
            features: f.map(|f| tape.constant(f.clone())),
        };
        let out = set_conv_at(&mut tape, store, &input, centers, k, mlp).unwrap();
        (tape.value(out.coords).clone(), tape.value(out.features.unwrap()).clone())
    }

    #[test]
    fn set_conv_self_neighbor_has_zero_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        // identity-like first layer reads the offset straight through
        let mlp = Mlp::new(&mut store, &mut rng, "sc", 3, &[3], false).unwrap();
        let w = store.get_mut("sc.0.w").unwrap();
        w.tensor = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let x = random_cloud(&mut rng, 10, 1.0);
        let (_, feats) = run_conv(&store, &mlp, &x, None, &[0, 3, 7], 1);
        assert!(feats.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn set_conv_width_mismatch_is_rejected() {
        let (store, mlp, x, _) = conv_fixture(8, 2, 0);
        let mut tape = Tape::new();
        let input = PointSet {
            coords: tape.constant(x),
            features: None,
        };
        let err = set_conv_at(&mut tape, &store, &input, &[0, 1], 2, &mlp).unwrap_err().to_string();
        assert!(err.contains("expects width 7"), "{err}");
    }

    #[test]
    fn set_conv_translation_invariance_is_exact() {
        let (store, mlp, _, f) = conv_fixture(20, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // dyadic coordinates and integer shifts keep every subtraction exact
        let pts: Vec<Vec3> = (0..20)
            .map(|_| [0; 3].map(|_: i32| rng.random_range(-64i32..64) as f64 / 8.0))
            .collect();
        let x = Tensor::from_rows(&pts);
        let shift = [3.0, -7.0, 12.0];
        let shifted = Tensor::from_rows(&pts.iter().map(|p| [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]]).collect::<Vec<_>>());
        let centers = farthest_point_sample(&x, 6, FpsStart::First).unwrap();
        assert_eq!(centers, farthest_point_sample(&shifted, 6, FpsStart::First).unwrap());
        let (c1, f1) = run_conv(&store, &mlp, &x, f.as_ref(), &centers, 4);
        let (c2, f2) = run_conv(&store, &mlp, &shifted, f.as_ref(), &centers, 4);
        assert_eq!(f1, f2);
        for i in 0..6 {
            for a in 0..3 {
                assert_eq!(c2.row(i)[a], c1.row(i)[a] + shift[a]);
            }
        }
    }

    #[test]
    fn set_conv_is_permutation_invariant_with_fixed_centers() {
        let (store, mlp, x, f) = conv_fixture(24, 2, 7);
        let f = f.unwrap();
        let centers = [0usize, 5, 9, 17];
        let (_, base) = run_conv(&store, &mlp, &x, Some(&f), &centers, 5);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let perm = index::sample(&mut rng, 24, 24).into_vec();
        let mut inv = vec![0; 24];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let xp = PointCloud::new(x.clone(), Some(f.clone())).unwrap().select(&perm);
        let moved: Vec<usize> = centers.iter().map(|&c| inv[c]).collect();
        let (_, out) = run_conv(&store, &mlp, xp.coords(), xp.features(), &moved, 5);
        assert!(out.max_abs_diff(&base) < 1e-6);
    }

    #[test]
    fn set_conv_gradients_match_finite_differences() {
        let (store, mlp, x, f) = conv_fixture(8, 2, 9);
        let err = check_param_gradients(&store, None, FdOptions::default(), |tape, s| {
            let input = PointSet {
                coords: tape.constant(x.clone()),
                features: f.as_ref().map(|f| tape.constant(f.clone())),
            };
            let (out, _) = set_conv(tape, s, &input, 4, 3, &mlp, FpsStart::First)?;
            let y = out.features.unwrap();
            let sq = tape.mul(y, y)?;
            Ok(tape.sum_all(sq))
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    fn upconv_fixture(seed: u64, c_sparse: usize, c_dense: usize) -> (ParamStore, Mlp, Mlp) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let m1 = Mlp::new(&mut store, &mut rng, "up1", 3 + c_sparse, &[5], true).unwrap();
        let m2 = Mlp::new(&mut store, &mut rng, "up2", 5 + c_dense, &[4], true).unwrap();
        (store, m1, m2)
    }

    #[test]
    fn set_upconv_self_propagation() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::new();
        let m1 = Mlp::new(&mut store, &mut rng, "up", 5, &[5], false).unwrap();
        let mut eye = vec![0.0; 25];
        for i in 0..5 {
            eye[i * 6] = 1.0;
        }
        store.get_mut("up.0.w").unwrap().tensor = Tensor::new(vec![5, 5], eye).unwrap();
        let x = random_cloud(&mut rng, 6, 1.0);
        let f = random_features(&mut rng, 6, 2);
        let mut tape = Tape::new();
        let xs = tape.constant(x);
        let fs = tape.constant(f.clone());
        let set = PointSet {
            coords: xs,
            features: Some(fs),
        };
        let dense = PointSet {
            coords: xs,
            features: None,
        };
        let out = set_upconv(&mut tape, &store, &dense, &set, 1, &m1, None).unwrap();
        let out = tape.value(out);
        for i in 0..6 {
            assert_eq!(&out.row(i)[..3], &[0.0; 3]);
            assert_eq!(&out.row(i)[3..], f.row(i));
        }
    }

    #[test]
    fn set_upconv_rows_follow_dense_cloud() {
        let (store, m1, m2) = upconv_fixture(11, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for (nd, ns) in [(16, 8), (5, 8), (30, 2)] {
            let mut tape = Tape::new();
            let dense = PointSet {
                coords: tape.constant(random_cloud(&mut rng, nd, 1.0)),
                features: Some(tape.constant(random_features(&mut rng, nd, 2))),
            };
            let sparse = PointSet {
                coords: tape.constant(random_cloud(&mut rng, ns, 1.0)),
                features: Some(tape.constant(random_features(&mut rng, ns, 3))),
            };
            let out = set_upconv(&mut tape, &store, &dense, &sparse, 2, &m1, Some(&m2)).unwrap();
            assert_eq!(tape.shape(out), &[nd, 4]);
        }
    }

    #[test]
    fn set_upconv_gradients_match_finite_differences() {
        let (store, m1, m2) = upconv_fixture(15, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let xd = random_cloud(&mut rng, 16, 1.0);
        let fd = random_features(&mut rng, 16, 2);
        let xs = random_cloud(&mut rng, 8, 1.0);
        let fs = random_features(&mut rng, 8, 3);
        let err = check_param_gradients(&store, None, FdOptions::default(), |tape, s| {
            let dense = PointSet {
                coords: tape.constant(xd.clone()),
                features: Some(tape.constant(fd.clone())),
            };
            let sparse = PointSet {
                coords: tape.constant(xs.clone()),
                features: Some(tape.leaf(fs.clone())),
            };
            let y = set_upconv(tape, s, &dense, &sparse, 3, &m1, Some(&m2))?;
            let sq = tape.mul(y, y)?;
            Ok(tape.sum_all(sq))
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn knn_equals_oracle(seed in any::<u64>(), n in 1usize..=256, m in 1usize..=32) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = random_cloud(&mut rng, n, 3.0);
            let q = random_cloud(&mut rng, m, 3.0);
            let k = rng.random_range(1..=n);
            let got = knn(&q, &r, k).unwrap();
            prop_assert_eq!(got.indices, brute_knn(&q, &r, k));
        }

        #[test]
        fn fps_equals_oracle(seed in any::<u64>(), n in 1usize..=64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_cloud(&mut rng, n, 3.0);
            let m = rng.random_range(1..=n);
            prop_assert_eq!(farthest_point_sample(&x, m, FpsStart::First).unwrap(), greedy_fps(&x, m));
        }
    }
}
