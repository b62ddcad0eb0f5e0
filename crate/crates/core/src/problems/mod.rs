//! Desk-scale training problems and the data sharding used by the workers.

mod data;
mod linalg;
mod logistic;
mod mlp;
mod quadratic;

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use data::{make_shards, Dataset, Shard};
pub use logistic::Logistic;
pub use mlp::{TinyMlp, MAX_HIDDEN, STATS_MOMENTUM};
pub use quadratic::Quadratic;

use crate::error::{Error, Result};
use crate::param::{ParamVector, Rng, Seed};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKind {
    Quadratic,
    Logistic,
    TinyMlp,
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Quadratic => "quadratic",
            Self::Logistic => "logistic",
            Self::TinyMlp => "tiny-mlp",
        })
    }
}

/// What a worker evaluates its gradient on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Batch {
    Examples(Vec<usize>),
    /// The quadratic has no data; each query draws fresh noise instead.
    Noise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSample<T> {
    pub loss: T,
    pub grad: ParamVector<T>,
    /// Running statistics after this batch (empty unless the problem keeps any).
    pub stats: ParamVector<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Problem<T> {
    Quadratic(Quadratic<T>),
    Logistic(Logistic<T>),
    TinyMlp(TinyMlp<T>),
}

impl<T: Scalar> Problem<T> {
    pub fn kind(&self) -> ProblemKind {
        match self {
            Self::Quadratic(_) => ProblemKind::Quadratic,
            Self::Logistic(_) => ProblemKind::Logistic,
            Self::TinyMlp(_) => ProblemKind::TinyMlp,
        }
    }

    pub fn param_len(&self) -> usize {
        match self {
            Self::Quadratic(q) => q.dim(),
            Self::Logistic(l) => l.dim(),
            Self::TinyMlp(m) => m.param_len(),
        }
    }

    pub fn stats_len(&self) -> usize {
        match self {
            Self::TinyMlp(m) => m.stats_len(),
            _ => 0,
        }
    }

    /// Number of examples, `None` for the data-free quadratic.
    pub fn dataset_len(&self) -> Option<usize> {
        match self {
            Self::Quadratic(_) => None,
            Self::Logistic(l) => Some(l.data().len()),
            Self::TinyMlp(m) => Some(m.data().len()),
        }
    }

    pub fn initial_params(&self, seed: Seed) -> Result<ParamVector<T>> {
        match self {
            Self::TinyMlp(m) => m.initial_params(seed),
            _ => Ok(ParamVector::zeros(self.param_len())),
        }
    }

    pub fn initial_stats(&self) -> ParamVector<T> {
        match self {
            Self::TinyMlp(m) => m.initial_stats(),
            _ => ParamVector::zeros(0),
        }
    }

    /// I.i.d. batch of `batch_size` example indices from `shard`, drawn with replacement.
    pub fn sample_batch(&self, shard: Option<&Shard>, batch_size: usize, rng: &mut Rng) -> Result<Batch> {
        match self {
            Self::Quadratic(_) => Ok(Batch::Noise),
            _ => {
                let shard = shard.ok_or(Error::Empty("worker has no data shard"))?;
                Ok(Batch::Examples(shard.sample(batch_size, rng)?))
            }
        }
    }

    /// Loss and gradient on `batch`; an unbiased estimate of the full gradient.
    pub fn stochastic_gradient(
        &self,
        params: &ParamVector<T>,
        stats: &ParamVector<T>,
        batch: &Batch,
        rng: &mut Rng,
    ) -> Result<GradientSample<T>> {
        let (loss, grad, stats) = match (self, batch) {
            (Self::Quadratic(q), Batch::Noise) => {
                let (loss, grad) = q.noisy_gradient(params, rng)?;
                (loss, grad, stats.clone())
            }
            (Self::Logistic(l), Batch::Examples(indices)) => {
                let (loss, grad) = l.batch_loss_and_gradient(params, indices)?;
                (loss, grad, stats.clone())
            }
            (Self::TinyMlp(m), Batch::Examples(indices)) => m.batch_loss_and_gradient(params, stats, indices)?,
            (_, Batch::Noise) => return Err(Error::Unsupported(format!("{} needs example batches", self.kind()))),
            (Self::Quadratic(_), Batch::Examples(_)) => {
                return Err(Error::Unsupported("quadratic takes noise batches, not examples".into()))
            }
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite { index: 0 });
        }
        Ok(GradientSample { loss, grad, stats })
    }

    /// Full-objective loss and gradient without noise.
    pub fn exact_gradient(&self, params: &ParamVector<T>) -> Result<(T, ParamVector<T>)> {
        match self {
            Self::Quadratic(q) => q.loss_and_gradient(params),
            Self::Logistic(l) => l.loss_and_gradient(params),
            Self::TinyMlp(m) => m.loss_and_gradient(params),
        }
    }

    pub fn loss(&self, params: &ParamVector<T>) -> Result<T> {
        Ok(self.exact_gradient(params)?.0)
    }

    /// Minimizer and minimum value, when known.
    pub fn optimum(&self) -> Option<(ParamVector<T>, T)> {
        match self {
            Self::Quadratic(q) => Some((q.optimum().clone(), T::zero())),
            Self::Logistic(l) => l.optimum().cloned(),
            Self::TinyMlp(_) => None,
        }
    }

    /// `F(params) - F(w*)`.
    pub fn true_suboptimality(&self, params: &ParamVector<T>) -> Result<T> {
        let (_, best) = self.optimum().ok_or_else(|| {
            Error::Unsupported(format!(
                "{} has no known optimum, suboptimality is undefined",
                self.kind()
            ))
        })?;
        Ok(self.loss(params)? - best)
    }

    /// `(mu, L)` when the problem is strongly convex and smooth.
    pub fn constants(&self) -> Option<(f64, f64)> {
        match self {
            Self::Quadratic(q) => Some((q.mu(), q.smoothness())),
            Self::Logistic(l) if l.l2() > 0.0 => Some((l.l2(), l.smoothness())),
            _ => None,
        }
    }
}

/// Serializable problem description.
///
/// * quadratic: `d`, `mu`, `L` (eigenvalue range), `sigma` (gradient noise).
/// * logistic: `d`, `M` synthetic examples or a `csv` file, `mu` is the L2
///   strength; `L` is computed from the data and may not be given.
/// * tiny-mlp: `d`, `M` or `csv`, `hidden` units (default 8).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub kind: ProblemKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(rename = "M", default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(rename = "L", default, skip_serializing_if = "Option::is_none")]
    pub l: Option<f64>,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
}

impl ProblemSpec {
    pub fn quadratic(d: usize, mu: f64, l: f64, sigma: f64, seed: u64) -> Self {
        Self {
            kind: ProblemKind::Quadratic,
            d: Some(d),
            m: None,
            mu: Some(mu),
            l: Some(l),
            sigma,
            seed,
            hidden: None,
            csv: None,
        }
    }

    pub fn logistic(d: usize, m: usize, l2: f64, seed: u64) -> Self {
        Self {
            kind: ProblemKind::Logistic,
            d: Some(d),
            m: Some(m),
            mu: Some(l2),
            l: None,
            sigma: 0.0,
            seed,
            hidden: None,
            csv: None,
        }
    }

    pub fn tiny_mlp(d: usize, m: usize, hidden: usize, seed: u64) -> Self {
        Self {
            kind: ProblemKind::TinyMlp,
            d: Some(d),
            m: Some(m),
            mu: None,
            l: None,
            sigma: 0.0,
            seed,
            hidden: Some(hidden),
            csv: None,
        }
    }

    fn reject(&self, field: &str, why: &str) -> Error {
        Error::InvalidConfig(format!("problem.{field}: {why} for kind {}", self.kind))
    }

    fn dataset<T: Scalar>(&self) -> Result<Dataset<T>> {
        let data = match (&self.csv, self.m) {
            (Some(_), Some(_)) => return Err(self.reject("M", "give either M or csv, not both")),
            (Some(path), None) => {
                let file = std::fs::File::open(path)
                    .map_err(|e| Error::DataFormat(format!("problem.csv {}: {e}", path.display())))?;
                Dataset::from_csv(std::io::BufReader::new(file))?
            }
            (None, Some(m)) => {
                let d = self.d.ok_or_else(|| self.reject("d", "required with synthetic data"))?;
                if d == 0 {
                    return Err(self.reject("d", "must be positive"));
                }
                Dataset::synthetic(d, m, Seed(self.seed))?
            }
            (None, None) => return Err(self.reject("M", "required (or csv)")),
        };
        if let Some(d) = self.d {
            if d != data.dim() {
                return Err(self.reject("d", &format!("is {d} but the data has {} features", data.dim())));
            }
        }
        if self.sigma != 0.0 {
            return Err(self.reject("sigma", "only the quadratic takes injected noise"));
        }
        Ok(data)
    }

    pub fn build<T: Scalar>(&self) -> Result<Problem<T>> {
        match self.kind {
            ProblemKind::Quadratic => {
                let d = self.d.ok_or_else(|| self.reject("d", "required"))?;
                let mu = self.mu.ok_or_else(|| self.reject("mu", "required"))?;
                let l = self.l.ok_or_else(|| self.reject("L", "required"))?;
                if self.m.is_some() || self.csv.is_some() || self.hidden.is_some() {
                    return Err(self.reject("M/csv/hidden", "not used"));
                }
                Ok(Problem::Quadratic(Quadratic::random(
                    d,
                    mu,
                    l,
                    self.sigma,
                    Seed(self.seed),
                )?))
            }
            ProblemKind::Logistic => {
                if self.l.is_some() {
                    return Err(self.reject("L", "is computed from the data and may not be given"));
                }
                if self.hidden.is_some() {
                    return Err(self.reject("hidden", "not used"));
                }
                Ok(Problem::Logistic(Logistic::new(
                    self.dataset()?,
                    self.mu.unwrap_or(0.0),
                )?))
            }
            ProblemKind::TinyMlp => {
                if self.mu.is_some() || self.l.is_some() {
                    return Err(self.reject("mu/L", "not used"));
                }
                Ok(Problem::TinyMlp(TinyMlp::new(
                    self.dataset()?,
                    self.hidden.unwrap_or(8),
                )?))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{gaussian, Stream};

    fn quad(eigs: &[f64], opt: &[f64], sigma: f64) -> Problem<f64> {
        Problem::Quadratic(Quadratic::diagonal(eigs, opt, sigma).unwrap())
    }

    fn all_problems() -> Vec<Problem<f64>> {
        vec![
            ProblemSpec::quadratic(6, 0.5, 4.0, 0.0, 3).build().unwrap(),
            ProblemSpec::logistic(5, 120, 0.05, 3).build().unwrap(),
            ProblemSpec::logistic(4, 60, 0.0, 5).build().unwrap(),
            ProblemSpec::tiny_mlp(4, 50, 6, 3).build().unwrap(),
        ]
    }

    fn random_point(len: usize, rng: &mut Rng) -> ParamVector<f64> {
        ParamVector::new((0..len).map(|_| gaussian::<f64>(rng, 1.0)).collect()).unwrap()
    }

    #[test]
    fn quadratic_examples() {
        let p = quad(&[1.0], &[1.0], 0.0);
        let mut rng = Seed(0).worker_stream(0, 0);
        let w = ParamVector::new(vec![3.0]).unwrap();
        let s = p
            .stochastic_gradient(&w, &p.initial_stats(), &Batch::Noise, &mut rng)
            .unwrap();
        assert_eq!(s.loss, 2.0);
        assert_eq!(s.grad.as_slice(), &[2.0]);

        let p = quad(&[1.0, 4.0], &[0.5, -2.0], 0.0);
        let at = p.optimum().unwrap().0;
        assert_eq!(p.true_suboptimality(&at).unwrap(), 0.0);
        let (_, g) = p.exact_gradient(&at).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        let off = ParamVector::new(vec![1.5, -1.0]).unwrap();
        assert_eq!(p.true_suboptimality(&off).unwrap(), 2.5);
    }

    #[test]
    fn random_quadratic_has_exact_spectrum() {
        let q = Quadratic::<f64>::random(8, 0.3, 7.0, 1.0, Seed(11)).unwrap();
        assert_eq!(q.mu(), 0.3);
        assert_eq!(q.smoothness(), 7.0);
        // Rayleigh quotients along random directions stay inside [mu, L].
        let mut rng = Seed(1).stream(Stream::Calibration, 0, 0);
        let zero = ParamVector::zeros(8);
        for _ in 0..50 {
            let x = random_point(8, &mut rng);
            let shifted = crate::param::axpy(1.0, &x, q.optimum()).unwrap();
            let (loss, _) = q.loss_and_gradient(&shifted).unwrap();
            let ratio = 2.0 * loss / x.norm_sq();
            assert!((0.3 - 1e-12..=7.0 + 1e-12).contains(&ratio), "{ratio}");
        }
        assert!(q.loss_and_gradient(&zero).unwrap().0 > 0.0);
        assert!(Quadratic::<f64>::random(3, 2.0, 1.0, 0.0, Seed(1)).is_err());
        assert!(Quadratic::<f64>::random(3, 1.0, 2.0, -1.0, Seed(1)).is_err());
    }

    #[test]
    fn logistic_two_points_at_zero() {
        // x = +1 labelled 1 and x = -1 labelled 0: separable.
        let data = Dataset::new(1, vec![1.0, -1.0], vec![1.0, 0.0]).unwrap();
        let p = Problem::Logistic(Logistic::new(data, 0.0).unwrap());
        let w = ParamVector::zeros(1);
        let (loss, grad) = p.exact_gradient(&w).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        // Each point contributes (sigmoid(0) - y) x = -1/2, mean -1/2.
        assert!((grad.as_slice()[0] + 0.5).abs() < 1e-15);
        assert!(p.optimum().is_none());
        assert!(p.true_suboptimality(&w).is_err());
    }

    #[test]
    fn logistic_optimum_is_accurate() {
        let p: Problem<f64> = ProblemSpec::logistic(20, 2000, 1e-2, 7).build().unwrap();
        let (w, best) = p.optimum().unwrap();
        let (_, g) = p.exact_gradient(&w).unwrap();
        assert!(g.norm_sq().sqrt() <= 1e-11, "{}", g.norm_sq().sqrt());
        assert!(p.true_suboptimality(&w).unwrap().abs() <= 1e-10);
        // Strong convexity: moving away costs at least mu/2 |dx|^2.
        let mut rng = Seed(2).stream(Stream::Calibration, 0, 0);
        for _ in 0..20 {
            let dx = random_point(20, &mut rng).scale(0.1).unwrap();
            let x = crate::param::axpy(1.0, &dx, &w).unwrap();
            let gap = p.loss(&x).unwrap() - best;
            assert!(gap >= 0.5 * 1e-2 * dx.norm_sq() * (1.0 - 1e-9));
        }
        let (mu, l) = p.constants().unwrap();
        assert_eq!(mu, 1e-2);
        assert!(l > mu && l < 1.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Seed(9).stream(Stream::Calibration, 0, 0);
        for p in all_problems() {
            let n = p.param_len();
            for _ in 0..10 {
                let w = random_point(n, &mut rng);
                let (_, g) = p.exact_gradient(&w).unwrap();
                let h = 1e-6;
                let fd: Vec<f64> = (0..n)
                    .map(|i| {
                        let mut up = w.clone().into_vec();
                        let mut down = up.clone();
                        up[i] += h;
                        down[i] -= h;
                        let fu = p.loss(&ParamVector::new(up).unwrap()).unwrap();
                        let fdn = p.loss(&ParamVector::new(down).unwrap()).unwrap();
                        (fu - fdn) / (2.0 * h)
                    })
                    .collect();
                let fd = ParamVector::new(fd).unwrap();
                let err = sq_dist_f(&fd, &g).sqrt() / g.norm_sq().sqrt().max(1e-8);
                assert!(err <= 1e-5, "{:?}: relative error {err}", p.kind());
            }
        }
    }

    fn sq_dist_f(a: &ParamVector<f64>, b: &ParamVector<f64>) -> f64 {
        crate::param::sq_dist(a, b).unwrap()
    }

    #[test]
    fn quadratic_noise_calibration() {
        let sigma = 1.5;
        let p = Quadratic::<f64>::random(5, 1.0, 3.0, sigma, Seed(4)).unwrap();
        let w = ParamVector::from_f64(&[0.3, -0.2, 1.0, 0.0, 2.0]).unwrap();
        let (_, exact) = p.loss_and_gradient(&w).unwrap();
        let n = 10_000;
        let samples: Vec<f64> = (0..n)
            .map(|i| {
                let mut rng = Seed(4).worker_stream(0, i);
                let (_, g) = p.noisy_gradient(&w, &mut rng).unwrap();
                sq_dist_f(&g, &exact)
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - sigma * sigma).abs() <= 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn stochastic_gradient_is_unbiased_on_full_batch() {
        for p in all_problems().into_iter().skip(1) {
            let w = p.initial_params(Seed(1)).unwrap();
            let all: Vec<usize> = (0..p.dataset_len().unwrap()).collect();
            let mut rng = Seed(1).worker_stream(0, 0);
            let s = p
                .stochastic_gradient(&w, &p.initial_stats(), &Batch::Examples(all), &mut rng)
                .unwrap();
            let (loss, grad) = p.exact_gradient(&w).unwrap();
            assert_eq!(s.loss, loss);
            assert_eq!(s.grad, grad);
        }
    }

    #[test]
    fn convexity_witness() {
        let mut rng = Seed(12).stream(Stream::Calibration, 0, 0);
        for p in all_problems().into_iter().take(3) {
            let n = p.param_len();
            for _ in 0..100 {
                let x = random_point(n, &mut rng).scale(3.0).unwrap();
                let y = random_point(n, &mut rng).scale(3.0).unwrap();
                let mid = crate::mean_of([&x, &y]).unwrap();
                let lhs = p.loss(&mid).unwrap();
                let rhs = (p.loss(&x).unwrap() + p.loss(&y).unwrap()) / 2.0;
                assert!(lhs <= rhs + 1e-12 * rhs.abs(), "{:?}: {lhs} > {rhs}", p.kind());
            }
        }
    }

    #[test]
    fn batches_and_errors() {
        let p = ProblemSpec::logistic(3, 30, 0.1, 1).build::<f64>().unwrap();
        let shards = make_shards(30, 3, Seed(1)).unwrap();
        let mut rng = Seed(1).worker_stream(1, 0);
        let batch = p.sample_batch(Some(&shards[1]), 8, &mut rng).unwrap();
        match &batch {
            Batch::Examples(ix) => assert!(ix.len() == 8 && ix.iter().all(|i| shards[1].indices.contains(i))),
            Batch::Noise => panic!("expected examples"),
        }
        assert!(p.sample_batch(None, 8, &mut rng).is_err());
        let w = ParamVector::zeros(3);
        let stats = p.initial_stats();
        assert!(p.stochastic_gradient(&w, &stats, &Batch::Noise, &mut rng).is_err());
        assert!(matches!(
            p.stochastic_gradient(&w, &stats, &Batch::Examples(vec![30]), &mut rng),
            Err(Error::IndexOutOfRange { index: 30, len: 30 })
        ));
        assert!(p
            .stochastic_gradient(&ParamVector::zeros(2), &stats, &batch, &mut rng)
            .is_err());

        let mlp = ProblemSpec::tiny_mlp(3, 30, 4, 1).build::<f64>().unwrap();
        assert!(mlp.true_suboptimality(&mlp.initial_params(Seed(0)).unwrap()).is_err());
        assert!(mlp.constants().is_none());
        assert_eq!(mlp.stats_len(), 8);
    }

    #[test]
    fn spec_json_and_validation() {
        let spec: ProblemSpec =
            serde_json::from_str(r#"{"kind":"quadratic","d":4,"mu":1.0,"L":10.0,"sigma":0.5,"seed":3}"#).unwrap();
        assert_eq!(spec, ProblemSpec::quadratic(4, 1.0, 10.0, 0.5, 3));
        let back: ProblemSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
        let p = spec.build::<f64>().unwrap();
        assert_eq!(p.constants(), Some((1.0, 10.0)));

        let err = |json: &str| {
            serde_json::from_str::<ProblemSpec>(json)
                .unwrap()
                .build::<f64>()
                .unwrap_err()
                .to_string()
        };
        assert!(err(r#"{"kind":"logistic","d":3,"M":20,"L":2.0}"#).contains("problem.L"));
        assert!(err(r#"{"kind":"quadratic","d":3,"mu":2.0,"L":1.0}"#).contains("problem.mu"));
        assert!(err(r#"{"kind":"quadratic","d":3,"mu":1.0}"#).contains("problem.L"));
        assert!(err(r#"{"kind":"logistic","d":3,"M":20,"sigma":1.0}"#).contains("problem.sigma"));
        assert!(err(r#"{"kind":"tiny-mlp","d":3,"M":20,"hidden":64}"#).contains("problem.hidden"));
        assert!(serde_json::from_str::<ProblemSpec>(r#"{"kind":"quadratic","dim":3}"#).is_err());
    }

    #[test]
    fn csv_backed_logistic() {
        let dir = std::env::temp_dir().join(format!("dssync-csv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("points.csv");
        std::fs::write(&path, "a,b,y\n1,0,1\n0,1,-1\n1,1,1\n-1,0.5,-1\n").unwrap();
        let spec = ProblemSpec {
            csv: Some(path.clone()),
            m: None,
            ..ProblemSpec::logistic(2, 0, 0.1, 0)
        };
        let p = spec.build::<f64>().unwrap();
        assert_eq!(p.dataset_len(), Some(4));
        assert!(p.optimum().is_some());
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn works_in_single_precision() {
        let p = ProblemSpec::logistic(3, 40, 0.1, 2).build::<f32>().unwrap();
        let (loss, grad) = p.exact_gradient(&ParamVector::zeros(3)).unwrap();
        assert!((loss - (2f32.ln() + 0.0)).abs() < 1e-6);
        assert_eq!(grad.len(), 3);
    }
}
