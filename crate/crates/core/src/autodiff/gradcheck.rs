use super::{AutodiffError, Graph, Tape, Tensor, Var};

/// Builds a scalar from leaf values on a tape.
pub trait ScalarFn<E>: Fn(&mut Tape, &[Var]) -> Result<Var, E> {}
impl<E, F: Fn(&mut Tape, &[Var]) -> Result<Var, E>> ScalarFn<E> for F {}

fn evaluate<E: From<AutodiffError>>(f: &impl ScalarFn<E>, points: &[Tensor]) -> Result<f64, E> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(&out);
    if value.len() != 1 {
        return Err(AutodiffError::NonScalarLoss(value.shape().to_vec()).into());
    }
    let v = value.item();
    if !v.is_finite() {
        return Err(AutodiffError::NonFiniteValue(format!("{}", v)).into());
    }
    Ok(v)
}

/// Reverse-mode gradients of `f` at `points`.
pub fn analytic_gradients<E: From<AutodiffError>>(f: &impl ScalarFn<E>, points: &[Tensor]) -> Result<Vec<Tensor>, E> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(&out)?;
    Ok(vars.iter().map(|v| grads.wrt(v)).collect::<Result<_, _>>()?)
}

/// Central-difference gradients of `f` at `points`.
pub fn numeric_gradients<E: From<AutodiffError>>(
    f: &impl ScalarFn<E>,
    points: &[Tensor],
    step: f64,
) -> Result<Vec<Tensor>, E> {
    let mut work: Vec<Tensor> = points.to_vec();
    let mut out = Vec::with_capacity(points.len());
    for p in 0..points.len() {
        let mut g = Tensor::zeros(points[p].shape());
        for i in 0..points[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + step;
            let plus = evaluate(f, &work)?;
            work[p].data_mut()[i] = orig - step;
            let minus = evaluate(f, &work)?;
            work[p].data_mut()[i] = orig;
            g.data_mut()[i] = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

/// Max over coordinates of `|analytic − numeric| / max(1e-8, |numeric|)`.
pub fn grad_check_multi<E: From<AutodiffError>>(f: impl ScalarFn<E>, points: &[Tensor], fd_step: f64) -> Result<f64, E> {
    evaluate(&f, points)?;
    let analytic = analytic_gradients(&f, points)?;
    let numeric = numeric_gradients(&f, points, fd_step)?;
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            worst = worst.max((av - nv).abs() / nv.abs().max(1e-8));
        }
    }
    Ok(worst)
}

pub fn grad_check<E: From<AutodiffError>>(
    f: impl Fn(&mut Tape, &Var) -> Result<Var, E>,
    point: &Tensor,
    fd_step: f64,
) -> Result<f64, E> {
    grad_check_multi(move |tape: &mut Tape, vars: &[Var]| f(tape, &vars[0]), std::slice::from_ref(point), fd_step)
}
