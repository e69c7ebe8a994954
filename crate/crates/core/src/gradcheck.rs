//! Central-difference gradient oracle.

use crate::error::{Error, Result};
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub h: f64,
    pub rtol: f64,
    /// Magnitude below which errors are measured absolutely.
    pub floor: f64,
    /// Backward rule to sabotage on the analytic pass (negative controls).
    pub fault: Option<OpKind>,
    /// Also try Ridders extrapolation over central differences with steps
    /// shrinking from `h`, keeping whichever estimate agrees better.
    pub adaptive: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            rtol: 1e-3,
            floor: 1e-6,
            fault: None,
            adaptive: false,
        }
    }
}

impl GradCheckOptions {
    pub fn with_rtol(mut self, rtol: f64) -> Self {
        self.rtol = rtol;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(input, flat element)` of the largest error.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub deterministic: bool,
    pub passed: bool,
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    let e = (analytic - numeric).abs() / denom;
    if e.is_nan() {
        f64::INFINITY
    } else {
        e
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.shape(out) != [1] {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            tape.shape(out)
        )));
    }
    Ok(tape.value(out).item())
}

/// Compare analytic and central-difference gradients of the scalar
/// function `f` at every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let points: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |e| (i, e)))
        .collect();
    grad_check_at(f, inputs, &points, opts)
}

/// As [`grad_check`], restricted to the listed `(input, element)` points.
pub fn grad_check_at<F>(
    f: F,
    inputs: &[Tensor],
    points: &[(usize, usize)],
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(kind) = opts.fault {
        tape.inject_fault(kind);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let base = tape.value(out).item();
    tape.backward(out)?;
    let grads: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let again = evaluate(&f, inputs)?;
    let deterministic = again.to_bits() == base.to_bits();

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        deterministic,
        passed: false,
    };
    let mut work = inputs.to_vec();
    for &(i, e) in points {
        let orig = work[i].data()[e];
        let mut central = |h: f64| -> Result<f64> {
            work[i].data_mut()[e] = orig + h;
            let plus = evaluate(&f, &work)?;
            work[i].data_mut()[e] = orig - h;
            let minus = evaluate(&f, &work)?;
            work[i].data_mut()[e] = orig;
            Ok((plus - minus) / (2.0 * h))
        };
        let analytic = grads[i].data()[e];
        let plain = central(opts.h)?;
        let (numeric, err) = if opts.adaptive {
            let extrapolated = ridders(&mut central, opts.h)?;
            [plain, extrapolated]
                .into_iter()
                .map(|n| (n, rel_err(analytic, n, opts.floor)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
        } else {
            (plain, rel_err(analytic, plain, opts.floor))
        };
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some((i, e));
            report.analytic = analytic;
            report.numeric = numeric;
        }
    }
    report.passed = deterministic && report.max_rel_err <= opts.rtol;
    Ok(report)
}

/// Ridders' method: a Neville tableau of central differences at steps
/// `h, h/1.4, h/1.4², ...`, returning the entry with the smallest error
/// estimate and stopping once higher orders get worse.
fn ridders(central: &mut dyn FnMut(f64) -> Result<f64>, h: f64) -> Result<f64> {
    const SHRINK: f64 = 1.4;
    const ROWS: usize = 16;
    const SAFE: f64 = 2.0;
    let c2 = SHRINK * SHRINK;
    let mut table = [[0.0; ROWS]; ROWS];
    let mut step = h;
    table[0][0] = central(step)?;
    let mut best = table[0][0];
    let mut err = f64::INFINITY;
    for i in 1..ROWS {
        step /= SHRINK;
        table[0][i] = central(step)?;
        let mut fac = c2;
        for j in 1..=i {
            table[j][i] = (table[j - 1][i] * fac - table[j - 1][i - 1]) / (fac - 1.0);
            fac *= c2;
            let e = (table[j][i] - table[j - 1][i])
                .abs()
                .max((table[j][i] - table[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = table[j][i];
            }
        }
        if (table[i][i] - table[i - 1][i - 1]).abs() >= SAFE * err {
            break;
        }
    }
    Ok(best)
}
