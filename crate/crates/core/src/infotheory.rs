//! Functional Fisher information of non-negative functions over a
//! Gaussian-augmented hidden layer.
//!
//! For a function `h` of the hidden representation and a center `phi`, the
//! information carried by coordinate `i` is the Monte-Carlo average over
//! `z ~ N(phi_i, 1)` of `(dh/dz_i)^2 / h` evaluated at `phi` with its `i`-th
//! entry replaced by `z`. Vector-valued `h` (an image generator) contributes
//! `sum_j (dh_j/dz_i)^2 / max(h_j, eps)`. Stacking the per-coordinate values
//! gives a layer information vector; the explanatory generator is trained to
//! align its vector with the classifier head's.

use ndarray::{s, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Network;
use crate::seed;

/// Floor applied to function values in the denominator.
pub const VALUE_FLOOR: f64 = 1e-6;
/// Floor applied to the information dot product inside the penalty.
pub const DOT_FLOOR: f64 = 1e-8;

const POINT_CHUNK: usize = 2048;

/// Monte-Carlo probe settings. The probe distribution around each center is
/// `N(phi_i, 1)` per coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GaussianProbe {
    pub samples_per_coord: usize,
    pub seed: u64,
}

impl GaussianProbe {
    pub fn new(samples_per_coord: usize, seed: u64) -> Result<Self> {
        let probe = GaussianProbe {
            samples_per_coord,
            seed,
        };
        probe.validate()?;
        Ok(probe)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples_per_coord < 2 {
            return Err(Error::invalid("samples_per_coord", "need at least 2 samples"));
        }
        Ok(())
    }
}

/// A function of `R^d` that can report its values together with the partial
/// derivative along one input coordinate per evaluation point.
pub trait ProbedFunction {
    fn input_dim(&self) -> usize;

    /// For each row of `points`, the output values and their partial
    /// derivatives with respect to input coordinate `coords[row]`.
    fn values_and_partials(
        &self,
        points: ArrayView2<f64>,
        coords: &[usize],
    ) -> Result<(Array2<f64>, Array2<f64>)>;
}

impl ProbedFunction for Network {
    fn input_dim(&self) -> usize {
        Network::input_dim(self)
    }

    fn values_and_partials(
        &self,
        points: ArrayView2<f64>,
        coords: &[usize],
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let tangent = unit_tangents(points.nrows(), points.ncols(), coords);
        let dual = self.forward_dual(points, tangent.view())?;
        Ok((dual.output().clone(), dual.tangent().clone()))
    }
}

/// Adapts a closure `f(point, coord) -> (values, partials)` into a
/// [`ProbedFunction`].
pub struct FnProbe<F> {
    dim: usize,
    f: F,
}

impl<F> FnProbe<F>
where
    F: Fn(ArrayView1<f64>, usize) -> (Vec<f64>, Vec<f64>),
{
    pub fn new(dim: usize, f: F) -> Self {
        FnProbe { dim, f }
    }
}

impl<F> ProbedFunction for FnProbe<F>
where
    F: Fn(ArrayView1<f64>, usize) -> (Vec<f64>, Vec<f64>),
{
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn values_and_partials(
        &self,
        points: ArrayView2<f64>,
        coords: &[usize],
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let mut rows = Vec::with_capacity(points.nrows());
        for (p, &c) in points.outer_iter().zip(coords) {
            rows.push((self.f)(p, c));
        }
        let m = rows.first().map_or(0, |r| r.0.len());
        let mut values = Array2::zeros((rows.len(), m));
        let mut partials = Array2::zeros((rows.len(), m));
        for (r, (v, d)) in rows.into_iter().enumerate() {
            if v.len() != m || d.len() != m {
                return Err(Error::Shape("probed function output width varies".into()));
            }
            values.row_mut(r).assign(&ArrayView1::from(&v));
            partials.row_mut(r).assign(&ArrayView1::from(&d));
        }
        Ok((values, partials))
    }
}

fn unit_tangents(rows: usize, cols: usize, coords: &[usize]) -> Array2<f64> {
    let mut t = Array2::zeros((rows, cols));
    for (r, &c) in coords.iter().enumerate() {
        t[[r, c]] = 1.0;
    }
    t
}

/// `sum_j partial_j^2 / max(value_j, eps)` for every row.
fn fisher_terms(values: &Array2<f64>, partials: &Array2<f64>) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(values.nrows());
    for (v, d) in values.outer_iter().zip(partials.outer_iter()) {
        let mut acc = 0.0;
        for (&hv, &dv) in v.iter().zip(d.iter()) {
            if !dv.is_finite() || !hv.is_finite() {
                return Err(Error::NonFinite("probed derivative"));
            }
            acc += dv * dv / hv.max(VALUE_FLOOR);
        }
        out.push(acc);
    }
    Ok(out)
}

/// Which function an information vector describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfoTarget {
    Generator,
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeMeta {
    pub samples_per_coord: usize,
    pub seed: u64,
    pub centers: usize,
    pub variance: f64,
}

/// Per-coordinate information `(I^1, ..., I^d)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoVector {
    pub values: Vec<f64>,
    pub function_tag: InfoTarget,
    pub probe: ProbeMeta,
}

/// Standard-normal offsets for every (center, coordinate, sample), drawn in
/// that order from the probe's stream.
pub fn probe_offsets(probe: &GaussianProbe, centers: usize, dim: usize) -> Array2<f64> {
    let mut rng = seed::stream(probe.seed, "gaussian-probe");
    probe_offsets_from(&mut rng, centers * dim, probe.samples_per_coord)
}

/// `[rows, samples]` standard-normal draws from a caller-owned stream.
pub fn probe_offsets_from<R: Rng + ?Sized>(rng: &mut R, rows: usize, samples: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, samples), || rng.sample::<f64, _>(StandardNormal))
}

/// Monte-Carlo information of coordinate `coord` of `h` around `center`.
pub fn coordinate_info<H: ProbedFunction + ?Sized>(
    h: &H,
    center: ArrayView1<f64>,
    coord: usize,
    probe: &GaussianProbe,
) -> Result<f64> {
    probe.validate()?;
    if center.len() != h.input_dim() {
        return Err(Error::Shape(format!(
            "center has {} entries, function takes {}",
            center.len(),
            h.input_dim()
        )));
    }
    if coord >= center.len() {
        return Err(Error::Shape(format!("coordinate {coord} out of range")));
    }
    let mut rng = seed::stream(probe.seed, &format!("gaussian-probe/{coord}"));
    let offsets = probe_offsets_from(&mut rng, 1, probe.samples_per_coord);
    let mut total = 0.0;
    for chunk in offsets.row(0).as_slice().expect("contiguous").chunks(POINT_CHUNK) {
        let mut points = Array2::zeros((chunk.len(), center.len()));
        for (mut row, &eps) in points.outer_iter_mut().zip(chunk) {
            row.assign(&center);
            row[coord] += eps;
        }
        let coords = vec![coord; chunk.len()];
        let (values, partials) = h.values_and_partials(points.view(), &coords)?;
        total += fisher_terms(&values, &partials)?.iter().sum::<f64>();
    }
    Ok(total / probe.samples_per_coord as f64)
}

/// Builds the probe points for one center: rows ordered by (coordinate,
/// sample), with the coordinate's entry shifted by the offset.
fn center_points(center: ArrayView1<f64>, offsets: ArrayView2<f64>) -> (Array2<f64>, Vec<usize>) {
    let (dim, samples) = (center.len(), offsets.ncols());
    let mut points = Array2::zeros((dim * samples, dim));
    let mut coords = Vec::with_capacity(dim * samples);
    for i in 0..dim {
        for s in 0..samples {
            let mut row = points.row_mut(i * samples + s);
            row.assign(&center);
            row[i] += offsets[[i, s]];
            coords.push(i);
        }
    }
    (points, coords)
}

/// Layer information vector of `h`, averaged over the rows of `centers`.
pub fn layer_info<H: ProbedFunction + ?Sized>(
    h: &H,
    centers: ArrayView2<f64>,
    probe: &GaussianProbe,
    tag: InfoTarget,
) -> Result<InfoVector> {
    probe.validate()?;
    let dim = h.input_dim();
    if centers.ncols() != dim {
        return Err(Error::Shape(format!(
            "centers have {} columns, function takes {dim}",
            centers.ncols()
        )));
    }
    if centers.nrows() == 0 {
        return Err(Error::EmptyDataset);
    }
    let offsets = probe_offsets(probe, centers.nrows(), dim);
    let values = layer_info_with_offsets(h, centers, offsets.view())?;
    Ok(InfoVector {
        values,
        function_tag: tag,
        probe: ProbeMeta {
            samples_per_coord: probe.samples_per_coord,
            seed: probe.seed,
            centers: centers.nrows(),
            variance: 1.0,
        },
    })
}

/// [`layer_info`] with explicit standard-normal offsets
/// (`[centers * d, samples]`, rows ordered by center then coordinate).
pub fn layer_info_with_offsets<H: ProbedFunction + ?Sized>(
    h: &H,
    centers: ArrayView2<f64>,
    offsets: ArrayView2<f64>,
) -> Result<Vec<f64>> {
    let dim = centers.ncols();
    let samples = offsets.ncols();
    let mut info = vec![0.0; dim];
    for (c, center) in centers.outer_iter().enumerate() {
        let block = offsets.slice(s![c * dim..(c + 1) * dim, ..]);
        let (points, coords) = center_points(center, block);
        for start in (0..points.nrows()).step_by(POINT_CHUNK) {
            let end = (start + POINT_CHUNK).min(points.nrows());
            let (values, partials) =
                h.values_and_partials(points.slice(s![start..end, ..]), &coords[start..end])?;
            for (term, &i) in fisher_terms(&values, &partials)?.iter().zip(&coords[start..end]) {
                info[i] += term;
            }
        }
    }
    let norm = (centers.nrows() * samples) as f64;
    info.iter_mut().for_each(|v| *v /= norm);
    Ok(info)
}

/// Cosine similarity of two information vectors.
pub fn info_alignment(a: &InfoVector, b: &InfoVector) -> Result<f64> {
    cosine(&a.values, &b.values)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `1 / max(I_g . I_f, eps_dot)`.
pub fn inverse_similarity_penalty(generator: &[f64], head: &[f64], eps_dot: f64) -> f64 {
    let dot: f64 = generator.iter().zip(head).map(|(g, f)| g * f).sum();
    1.0 / dot.max(eps_dot)
}

/// Value of `weight * inverse_similarity_penalty` for a network `g` probed at
/// `centers`, its generator information vector, and the gradient with
/// respect to `g`'s parameters (the head vector is a constant).
pub struct PenaltyEvaluation {
    pub penalty: f64,
    pub generator_info: Vec<f64>,
    pub grads: Vec<f64>,
}

pub fn penalty_and_gradient(
    g: &Network,
    centers: ArrayView2<f64>,
    offsets: ArrayView2<f64>,
    head_info: &[f64],
    weight: f64,
    eps_dot: f64,
) -> Result<PenaltyEvaluation> {
    let dim = g.input_dim();
    if centers.ncols() != dim || head_info.len() != dim {
        return Err(Error::Shape("penalty inputs disagree on the layer width".into()));
    }
    let samples = offsets.ncols();
    let norm = (centers.nrows() * samples) as f64;

    // forward: keep traces so the reverse pass needs no recomputation
    let mut traces = Vec::new();
    let mut info = vec![0.0; dim];
    for (c, center) in centers.outer_iter().enumerate() {
        let block = offsets.slice(s![c * dim..(c + 1) * dim, ..]);
        let (points, coords) = center_points(center, block);
        for start in (0..points.nrows()).step_by(POINT_CHUNK) {
            let end = (start + POINT_CHUNK).min(points.nrows());
            let chunk_coords = coords[start..end].to_vec();
            let tangent = unit_tangents(end - start, dim, &chunk_coords);
            let trace = g.forward_dual(points.slice(s![start..end, ..]), tangent.view())?;
            let terms = fisher_terms(trace.output(), trace.tangent())?;
            for (term, &i) in terms.iter().zip(&chunk_coords) {
                info[i] += term;
            }
            traces.push((trace, chunk_coords));
        }
    }
    info.iter_mut().for_each(|v| *v /= norm);

    let dot: f64 = info.iter().zip(head_info).map(|(a, b)| a * b).sum();
    let penalty = weight / dot.max(eps_dot);
    let mut grads = vec![0.0; g.num_params()];
    if dot <= eps_dot || weight == 0.0 {
        return Ok(PenaltyEvaluation {
            penalty,
            generator_info: info,
            grads,
        });
    }
    // d penalty / d I_g^i
    let outer: Vec<f64> = head_info.iter().map(|f| -weight * f / (dot * dot) / norm).collect();
    for (trace, coords) in &traces {
        let values = trace.output();
        let tangent = trace.tangent();
        let mut g_out = Array2::zeros(values.raw_dim());
        let mut g_tan = Array2::zeros(values.raw_dim());
        for (r, &i) in coords.iter().enumerate() {
            let w = outer[i];
            if w == 0.0 {
                continue;
            }
            for j in 0..values.ncols() {
                let (hv, tv) = (values[[r, j]], tangent[[r, j]]);
                let denom = hv.max(VALUE_FLOOR);
                g_tan[[r, j]] = w * 2.0 * tv / denom;
                if hv > VALUE_FLOOR {
                    g_out[[r, j]] = -w * tv * tv / (hv * hv);
                }
            }
        }
        g.backward_dual(trace, g_out.view(), g_tan.view(), &mut grads);
    }
    Ok(PenaltyEvaluation {
        penalty,
        generator_info: info,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, LayerSpec};
    use ndarray::{array, Axis};
    use rand::SeedableRng;

    fn exp_probe(a: f64, dim: usize, coord: usize) -> FnProbe<impl Fn(ArrayView1<f64>, usize) -> (Vec<f64>, Vec<f64>)> {
        FnProbe::new(dim, move |p: ArrayView1<f64>, c: usize| {
            let v = (a * p[coord]).exp();
            let d = if c == coord { a * v } else { 0.0 };
            (vec![v], vec![d])
        })
    }

    /// Independent oracle: E_{z ~ N(mu, 1)}[a^2 e^{a z}] by trapezoid quadrature.
    fn quadrature(a: f64, mu: f64) -> f64 {
        let (lo, hi, n) = (mu - 14.0, mu + 14.0, 200_000);
        let step = (hi - lo) / n as f64;
        let f = |z: f64| {
            a * a * (a * z).exp() * (-(z - mu) * (z - mu) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt()
        };
        (0..=n)
            .map(|k| {
                let w = if k == 0 || k == n { 0.5 } else { 1.0 };
                w * f(lo + k as f64 * step)
            })
            .sum::<f64>()
            * step
    }

    #[test]
    fn quadrature_oracle_agrees_with_closed_form() {
        assert!((quadrature(1.0, 0.0) - 0.5f64.exp()).abs() < 1e-8);
        assert!((quadrature(2.0, 0.0) - 4.0 * 2.0f64.exp()).abs() < 1e-6);
    }

    #[test]
    fn exponential_oracle_unit_rate() {
        let h = exp_probe(1.0, 3, 1);
        let center = array![0.4, 0.0, -1.0];
        let probe = GaussianProbe::new(10_000, 7).unwrap();
        let est = coordinate_info(&h, center.view(), 1, &probe).unwrap();
        let truth = quadrature(1.0, 0.0);
        assert!((est - truth).abs() / truth < 0.05, "{est} vs {truth}");
    }

    #[test]
    fn exponential_oracle_heavier_tail() {
        let h = exp_probe(2.0, 2, 0);
        let probe = GaussianProbe::new(50_000, 3).unwrap();
        let est = coordinate_info(&h, array![0.0, 0.0].view(), 0, &probe).unwrap();
        let truth = 29.556;
        assert!((est - truth).abs() / truth < 0.10, "{est}");
    }

    #[test]
    fn constant_function_has_no_information() {
        let h = FnProbe::new(2, |_: ArrayView1<f64>, _| (vec![3.0], vec![0.0]));
        let probe = GaussianProbe::new(16, 0).unwrap();
        assert_eq!(coordinate_info(&h, array![1.0, 2.0].view(), 0, &probe).unwrap(), 0.0);
    }

    #[test]
    fn estimator_is_seed_deterministic_and_converges() {
        let h = exp_probe(1.0, 1, 0);
        let s = 2_000;
        let a = coordinate_info(&h, array![0.0].view(), 0, &GaussianProbe::new(s, 5).unwrap()).unwrap();
        let b = coordinate_info(&h, array![0.0].view(), 0, &GaussianProbe::new(s, 5).unwrap()).unwrap();
        assert_eq!(a, b);
        let c = coordinate_info(&h, array![0.0].view(), 0, &GaussianProbe::new(4 * s, 5).unwrap()).unwrap();
        assert!((a - c).abs() / c < 2.0 / (s as f64).sqrt(), "{a} vs {c}");
    }

    #[test]
    fn scaling_the_function_scales_information() {
        let probe = GaussianProbe::new(500, 2).unwrap();
        let h = exp_probe(1.0, 1, 0);
        let base = coordinate_info(&h, array![0.3].view(), 0, &probe).unwrap();
        let scaled = FnProbe::new(1, |p: ArrayView1<f64>, _| {
            let v = 3.0 * p[0].exp();
            (vec![v], vec![v])
        });
        let s = coordinate_info(&scaled, array![0.3].view(), 0, &probe).unwrap();
        assert!((s - 3.0 * base).abs() < 1e-9 * s);
    }

    #[test]
    fn layer_info_isolates_the_used_coordinate() {
        let h = exp_probe(0.5, 5, 3);
        let centers = Array2::from_shape_fn((3, 5), |(i, j)| (i + j) as f64 * 0.1);
        let info = layer_info(&h, centers.view(), &GaussianProbe::new(8, 1).unwrap(), InfoTarget::Head).unwrap();
        assert_eq!(info.values.len(), 5);
        for (i, v) in info.values.iter().enumerate() {
            if i == 3 {
                assert!(*v > 0.0);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
        assert!(info.values.iter().all(|v| *v >= 0.0 && v.is_finite()));
    }

    #[test]
    fn alignment_closed_forms() {
        let meta = ProbeMeta {
            samples_per_coord: 2,
            seed: 0,
            centers: 1,
            variance: 1.0,
        };
        let v = |values: Vec<f64>| InfoVector {
            values,
            function_tag: InfoTarget::Head,
            probe: meta,
        };
        assert!((info_alignment(&v(vec![1.0, 2.0]), &v(vec![1.0, 2.0])).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(info_alignment(&v(vec![1.0, 0.0]), &v(vec![0.0, 1.0])).unwrap(), 0.0);
        let a = info_alignment(&v(vec![1.0, 3.0]), &v(vec![2.0, 1.0])).unwrap();
        let b = info_alignment(&v(vec![5.0, 15.0]), &v(vec![0.2, 0.1])).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(matches!(info_alignment(&v(vec![0.0, 0.0]), &v(vec![1.0, 1.0])), Err(Error::ZeroVector)));
    }

    #[test]
    fn penalty_closed_forms() {
        assert_eq!(inverse_similarity_penalty(&[1.0, 1.0], &[1.0, 1.0], DOT_FLOOR), 0.5);
        assert_eq!(inverse_similarity_penalty(&[1.0, 0.0], &[0.0, 1.0], DOT_FLOOR), 1.0 / DOT_FLOOR);
        let before = inverse_similarity_penalty(&[1.0, 2.0], &[0.5, 1.0], DOT_FLOOR);
        let after = inverse_similarity_penalty(&[1.0, 2.1], &[0.5, 1.0], DOT_FLOOR);
        assert!(after < before);
    }

    fn tiny_generator() -> Network {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        Network::new(
            &[
                LayerSpec::Dense { inputs: 4, outputs: 6 },
                LayerSpec::Activation(Activation::Relu),
                LayerSpec::Dense { inputs: 6, outputs: 5 },
                LayerSpec::Activation(Activation::Sigmoid),
            ],
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn network_partials_match_finite_differences() {
        let g = tiny_generator();
        let pts = Array2::from_shape_fn((3, 4), |(i, j)| (i as f64 - j as f64) * 0.3);
        let coords = [0, 2, 3];
        let (_, partials) = g.values_and_partials(pts.view(), &coords).unwrap();
        let h = 1e-6;
        for (r, &c) in coords.iter().enumerate() {
            let mut up = pts.row(r).to_owned();
            up[c] += h;
            let mut down = pts.row(r).to_owned();
            down[c] -= h;
            let fu = g.forward(up.insert_axis(Axis(0)).view()).unwrap();
            let fd = g.forward(down.insert_axis(Axis(0)).view()).unwrap();
            for j in 0..5 {
                let est = (fu[[0, j]] - fd[[0, j]]) / (2.0 * h);
                assert!((est - partials[[r, j]]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let mut g = tiny_generator();
        let centers = array![[0.2, 0.5, -0.1, 0.9], [1.0, 0.0, 0.3, 0.2]];
        let probe = GaussianProbe::new(4, 11).unwrap();
        let offsets = probe_offsets(&probe, 2, 4);
        let head = [0.3, 0.05, 0.8, 0.1];
        let eval = penalty_and_gradient(&g, centers.view(), offsets.view(), &head, 0.01, DOT_FLOOR).unwrap();
        let direct = layer_info_with_offsets(&g, centers.view(), offsets.view()).unwrap();
        assert_eq!(eval.generator_info, direct);
        let value = |g: &Network| {
            let info = layer_info_with_offsets(g, centers.view(), offsets.view()).unwrap();
            0.01 * inverse_similarity_penalty(&info, &head, DOT_FLOOR)
        };
        let h = 1e-6;
        for k in [0, 5, 13, 30, 40] {
            let orig = g.params()[k];
            g.params_mut()[k] = orig + h;
            let up = value(&g);
            g.params_mut()[k] = orig - h;
            let down = value(&g);
            g.params_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = eval.grads[k];
            assert!((fd - an).abs() <= 1e-2 * fd.abs().max(1e-9), "{k}: {fd} vs {an}");
        }
    }
}
