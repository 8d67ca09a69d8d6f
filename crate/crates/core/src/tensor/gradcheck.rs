use super::{Result, Tape, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Check at most this many randomly chosen coordinates per parameter
    /// tensor; `None` checks every coordinate.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true gradient is zero up to rounding are judged on absolute error.
    pub denominator_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-5, max_coords_per_param: None, seed: 0, denominator_floor: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub coords_checked: usize,
}

fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(f: &mut F, params: &[Tensor]) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out).item()
}

/// Compares tape gradients of the scalar `f(params)` with central
/// differences. Relative error uses `max(|analytic|, |numeric|, floor)` as
/// the denominator.
pub fn finite_diff_check<F>(mut f: F, params: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let analytic: Vec<Tensor> = match tape.backward(loss) {
        Ok(g) => vars
            .iter()
            .zip(params)
            .map(|(v, p)| g.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect(),
        Err(TensorError::DisconnectedGraph) => params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        Err(e) => return Err(e),
    };
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), coords_checked: 0 };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < p.numel() => {
                let mut c = rand::seq::index::sample(&mut rng, p.numel(), k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..p.numel()).collect(),
        };
        for i in coords {
            let orig = p.data()[i];
            work[pi].data_mut()[i] = orig + opts.eps;
            let plus = evaluate(&mut f, &work)?;
            work[pi].data_mut()[i] = orig - opts.eps;
            let minus = evaluate(&mut f, &work)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let err = relative_error(analytic[pi].data()[i], numeric, opts.denominator_floor);
            report.coords_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (pi, i);
            }
        }
    }
    Ok(report)
}
