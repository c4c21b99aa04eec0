//! Derivative-free Nelder-Mead simplex minimization.

#[derive(Debug, Clone, Copy)]
pub struct SimplexOptions {
    pub max_iters: usize,
    /// Converged when the simplex diameter (sup norm) falls below this...
    pub xtol: f64,
    /// ...and the spread of vertex values falls below this.
    pub ftol: f64,
}

#[derive(Debug, Clone)]
pub struct SimplexMinimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

/// Minimizes `f` from `x0` with an initial simplex `x0 + steps[i] e_i`.
pub fn nelder_mead<F>(mut f: F, x0: &[f64], steps: &[f64], opts: SimplexOptions) -> SimplexMinimum
where
    F: FnMut(&[f64]) -> f64,
{
    let dim = x0.len();
    assert_eq!(steps.len(), dim);
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut pts: Vec<Vec<f64>> = Vec::with_capacity(dim + 1);
    pts.push(x0.to_vec());
    for i in 0..dim {
        let mut p = x0.to_vec();
        p[i] += if steps[i] != 0.0 { steps[i] } else { 2.5e-4 };
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(|p| eval(p, &mut evals)).collect();

    let mut iterations = 0;
    let mut converged = false;
    let mut centroid = vec![0.0; dim];
    let mut trial = vec![0.0; dim];
    let mut trial2 = vec![0.0; dim];
    while iterations < opts.max_iters {
        // sort vertices by value
        let mut order: Vec<usize> = (0..=dim).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        pts = order.iter().map(|&i| pts[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();

        let fspread = vals[dim] - vals[0];
        let xspread = pts[1..]
            .iter()
            .flat_map(|p| p.iter().zip(&pts[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if fspread <= opts.ftol && xspread <= opts.xtol {
            converged = true;
            break;
        }
        iterations += 1;

        centroid.fill(0.0);
        for p in &pts[..dim] {
            for (c, v) in centroid.iter_mut().zip(p) {
                *c += v / dim as f64;
            }
        }
        let worst = pts[dim].clone();
        let along = |t: f64, out: &mut Vec<f64>| {
            for ((o, c), w) in out.iter_mut().zip(&centroid).zip(&worst) {
                *o = c + t * (c - w);
            }
        };

        along(alpha, &mut trial);
        let fr = eval(&trial, &mut evals);
        if fr < vals[0] {
            along(gamma, &mut trial2);
            let fe = eval(&trial2, &mut evals);
            if fe < fr {
                pts[dim].clone_from(&trial2);
                vals[dim] = fe;
            } else {
                pts[dim].clone_from(&trial);
                vals[dim] = fr;
            }
            continue;
        }
        if fr < vals[dim - 1] {
            pts[dim].clone_from(&trial);
            vals[dim] = fr;
            continue;
        }
        // contraction, outside or inside
        let (t, bound) = if fr < vals[dim] { (rho, fr) } else { (-rho, vals[dim]) };
        along(t, &mut trial2);
        let fc = eval(&trial2, &mut evals);
        if fc <= bound {
            pts[dim].clone_from(&trial2);
            vals[dim] = fc;
            continue;
        }
        // shrink toward the best vertex
        let best = pts[0].clone();
        for i in 1..=dim {
            for (v, b) in pts[i].iter_mut().zip(&best) {
                *v = b + sigma * (*v - b);
            }
            vals[i] = eval(&pts[i], &mut evals);
        }
    }
    let best = (0..=dim).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap_or(0);
    SimplexMinimum {
        x: pts[best].clone(),
        f: vals[best],
        iterations,
        evaluations: evals,
        converged,
    }
}
