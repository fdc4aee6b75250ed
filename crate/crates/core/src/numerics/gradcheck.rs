use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::tensor::{Element, Tensor};

/// Denominator floor for the relative error, so that gradients that are
/// zero up to rounding are compared in absolute terms.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compare the reverse-mode gradient of a scalar function against central
/// finite differences, element by element, returning the largest relative
/// error.
pub fn grad_check<T, F>(f: F, point: &Tensor<T>, step: f64) -> Result<f64>
where
    T: Element,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    grad_check_many(
        |g, vars| f(g, vars[0]),
        std::slice::from_ref(point),
        step,
        None,
    )
}

/// Multi-argument form of [`grad_check`].
///
/// `coords`, when given, restricts the finite-difference probes to the listed
/// `(argument, element)` pairs; otherwise every element of every argument is
/// probed.
pub fn grad_check_many<T, F>(
    f: F,
    points: &[Tensor<T>],
    step: f64,
    coords: Option<&[(usize, usize)]>,
) -> Result<f64>
where
    T: Element,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let eval = |args: &[Tensor<T>], track: bool| -> Result<(Graph<T>, Vec<Var>, Var)> {
        let mut graph = Graph::new();
        let vars: Vec<Var> = args.iter().map(|p| graph.leaf(p.clone(), track)).collect();
        let out = f(&mut graph, &vars)?;
        if graph.value(out).numel() != 1 {
            return Err(Error::Contract(format!(
                "grad_check needs a scalar-valued function, got shape {:?}",
                graph.value(out).shape()
            )));
        }
        Ok((graph, vars, out))
    };

    let (graph, vars, out) = eval(points, true)?;
    let grads = graph.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(points)
        .map(|(v, p)| {
            grads
                .get(*v)
                .map(|g| g.iter().map(|x| x.as_f64()).collect())
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();

    let all: Vec<(usize, usize)>;
    let probes = match coords {
        Some(c) => c,
        None => {
            all = points
                .iter()
                .enumerate()
                .flat_map(|(a, p)| (0..p.numel()).map(move |e| (a, e)))
                .collect();
            &all
        }
    };

    let mut args = points.to_vec();
    let mut worst = 0.0f64;
    for &(a, e) in probes {
        let orig = args[a].data()[e];
        args[a].data_mut()[e] = T::from_f64(orig.as_f64() + step);
        let (gp, _, op) = eval(&args, false)?;
        let plus = gp.scalar(op)?.as_f64();
        args[a].data_mut()[e] = T::from_f64(orig.as_f64() - step);
        let (gm, _, om) = eval(&args, false)?;
        let minus = gm.scalar(om)?.as_f64();
        args[a].data_mut()[e] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        worst = worst.max(relative_error(analytic[a][e], numeric));
    }
    Ok(worst)
}
