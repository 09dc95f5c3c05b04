use engage_core::classifiers::forest::{Node, RandomForest};

/// ICC(2,2) from a two-way ANOVA table over `n` subjects and two raters. The
/// error sum of squares is summed from the residuals directly.
pub fn icc_anova(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let k = 2.0;
    let grand = (a.iter().sum::<f64>() + b.iter().sum::<f64>()) / (n * k);
    let row_means: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x + y) / 2.0).collect();
    let col_means = [a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n];
    let ss_rows: f64 = row_means.iter().map(|m| k * (m - grand).powi(2)).sum();
    let ss_cols: f64 = col_means.iter().map(|m| n * (m - grand).powi(2)).sum();
    let mut ss_err = 0.0;
    for i in 0..a.len() {
        for (j, x) in [a[i], b[i]].into_iter().enumerate() {
            let r = x - row_means[i] - col_means[j] + grand;
            ss_err += r * r;
        }
    }
    let ms_r = ss_rows / (n - 1.0);
    let ms_c = ss_cols / (k - 1.0);
    let ms_e = ss_err / ((n - 1.0) * (k - 1.0));
    (ms_r - ms_e) / (ms_r + (ms_c - ms_e) / n)
}

/// Cyclic Jacobi eigenvalue iteration. Eigenvalues in descending order,
/// eigenvectors as rows.
pub fn jacobi_eigen(m: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|k| v[k][i]).collect()).collect();
    (values, vectors)
}

/// Sample covariance with the `n - 1` denominator, computed in two passes.
pub fn covariance(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = x.len();
    let d = x[0].len();
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let mut c = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..d {
            c[i][j] = x.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / (n as f64 - 1.0);
        }
    }
    c
}

fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-10 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = a[r][col] / a[col][col];
                for k in col..n {
                    a[r][k] -= f * a[col][k];
                }
                b[r] -= f * b[col];
            }
        }
    }
    Some((0..n).map(|i| b[i] / a[i][i]).collect())
}

fn dual_value(q: &[Vec<f64>], alpha: &[f64]) -> f64 {
    let n = alpha.len();
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            quad += alpha[i] * alpha[j] * q[i][j];
        }
    }
    alpha.iter().sum::<f64>() - 0.5 * quad
}

/// Exact maximum of the soft-margin SVM dual by enumerating every
/// assignment of each variable to {0, C, free}. For each assignment the
/// free variables solve the stationarity system with the equality
/// multiplier; infeasible and singular systems are discarded.
pub fn svm_dual_optimum(gram: &[Vec<f64>], y: &[f64], c: f64) -> (f64, Vec<f64>) {
    let n = y.len();
    let q: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| y[i] * y[j] * gram[i][j]).collect()).collect();
    let mut best = (f64::NEG_INFINITY, vec![0.0; n]);
    let total = 3usize.pow(n as u32);
    for code in 0..total {
        let mut state = vec![0u8; n];
        let mut rest = code;
        for s in state.iter_mut() {
            *s = (rest % 3) as u8;
            rest /= 3;
        }
        let mut alpha = vec![0.0; n];
        for i in 0..n {
            if state[i] == 1 {
                alpha[i] = c;
            }
        }
        let free: Vec<usize> = (0..n).filter(|&i| state[i] == 2).collect();
        let fixed_sum: f64 = (0..n).filter(|&i| state[i] == 1).map(|i| y[i] * c).sum();
        if free.is_empty() {
            if fixed_sum.abs() > 1e-12 {
                continue;
            }
        } else {
            let m = free.len();
            let mut a = vec![vec![0.0; m + 1]; m + 1];
            let mut rhs = vec![0.0; m + 1];
            for (r, &i) in free.iter().enumerate() {
                for (s, &j) in free.iter().enumerate() {
                    a[r][s] = q[i][j];
                }
                a[r][m] = y[i];
                let fixed: f64 = (0..n).filter(|&j| state[j] == 1).map(|j| q[i][j] * c).sum();
                rhs[r] = 1.0 - fixed;
                a[m][r] = y[i];
            }
            rhs[m] = -fixed_sum;
            let Some(sol) = solve_linear(a, rhs) else { continue };
            if free.iter().enumerate().any(|(r, _)| sol[r] < -1e-9 || sol[r] > c + 1e-9) {
                continue;
            }
            for (r, &i) in free.iter().enumerate() {
                alpha[i] = sol[r].clamp(0.0, c);
            }
        }
        let v = dual_value(&q, &alpha);
        if v > best.0 {
            best = (v, alpha);
        }
    }
    best
}

/// Platt fit by damped Newton on the smoothed-target log loss, written
/// independently of the library's solver.
pub fn platt_newton(f: &[f64], labels: &[bool]) -> (f64, f64) {
    let np = labels.iter().filter(|&&l| l).count() as f64;
    let nn = labels.len() as f64 - np;
    let t: Vec<f64> = labels
        .iter()
        .map(|&l| if l { (np + 1.0) / (np + 2.0) } else { 1.0 / (nn + 2.0) })
        .collect();
    let loss = |a: f64, b: f64| -> f64 {
        f.iter()
            .zip(&t)
            .map(|(&x, &ti)| {
                let p = 1.0 / (1.0 + (a * x + b).exp());
                let p = p.clamp(1e-300, 1.0 - 1e-16);
                -(ti * p.ln() + (1.0 - ti) * (1.0 - p).ln())
            })
            .sum()
    };
    let (mut a, mut b) = (0.0, ((nn + 1.0) / (np + 1.0)).ln());
    for _ in 0..200 {
        let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (0.0, 0.0, 1e-12, 0.0, 1e-12);
        for (&x, &ti) in f.iter().zip(&t) {
            let p = 1.0 / (1.0 + (a * x + b).exp());
            // d loss / dz with z = a x + b is (ti - p)
            let g = ti - p;
            let h = p * (1.0 - p);
            ga += g * x;
            gb += g;
            haa += h * x * x;
            hab += h * x;
            hbb += h;
        }
        if ga.abs() < 1e-12 && gb.abs() < 1e-12 {
            break;
        }
        let det = haa * hbb - hab * hab;
        let da = -(hbb * ga - hab * gb) / det;
        let db = -(haa * gb - hab * ga) / det;
        let base = loss(a, b);
        let mut step = 1.0;
        while step > 1e-12 && loss(a + step * da, b + step * db) > base {
            step /= 2.0;
        }
        a += step * da;
        b += step * db;
    }
    (a, b)
}

/// Central finite-difference gradient.
pub fn finite_difference(params: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over the entries.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// One-vs-rest AUROC by counting every positive/negative pair, ties as one
/// half, weighted by level prevalence.
pub fn weighted_auroc_pairs(scores: &[[f64; 3]], actual: &[usize]) -> f64 {
    let n = actual.len() as f64;
    let mut total = 0.0;
    for level in 0..3 {
        let pos: Vec<usize> = (0..actual.len()).filter(|&i| actual[i] == level).collect();
        let neg: Vec<usize> = (0..actual.len()).filter(|&i| actual[i] != level).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let mut credit = 0.0;
        for &i in &pos {
            for &j in &neg {
                let (si, sj) = (scores[i][level], scores[j][level]);
                credit += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
        total += pos.len() as f64 / n * credit / (pos.len() * neg.len()) as f64;
    }
    total
}

/// Mean of the leaf distributions reached in each tree, by recursive descent.
pub fn forest_mean(forest: &RandomForest<f64>, x: &[f64]) -> [f64; 3] {
    fn descend(nodes: &[Node<f64>], i: usize, x: &[f64]) -> [f64; 3] {
        match &nodes[i] {
            Node::Leaf { distribution } => *distribution,
            Node::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                if x[*feature] > *threshold {
                    descend(nodes, *right, x)
                } else {
                    descend(nodes, *left, x)
                }
            }
        }
    }
    let mut acc = [0.0; 3];
    for t in &forest.trees {
        let d = descend(&t.nodes, 0, x);
        for k in 0..3 {
            acc[k] += d[k];
        }
    }
    acc.map(|v| v / forest.trees.len() as f64)
}

/// The vote rule spelled out: count, keep the most frequent levels, prefer
/// larger summed probability, then the lower level.
pub fn vote_by_rule(levels: &[usize], dists: &[[f64; 3]]) -> usize {
    let count = |l: usize| levels.iter().filter(|&&x| x == l).count();
    let mass = |l: usize| dists.iter().map(|d| d[l]).sum::<f64>();
    let top = (0..3).map(count).max().unwrap();
    let tied: Vec<usize> = (0..3).filter(|&l| count(l) == top).collect();
    let mut best = tied[0];
    for &l in &tied[1..] {
        if mass(l) > mass(best) {
            best = l;
        }
    }
    best
}

/// Margin by sorting a copy of the probabilities.
pub fn sorted_margin(p: &[f64; 3]) -> f64 {
    let mut s = *p;
    s.sort_by(|a, b| b.total_cmp(a));
    s[0] - s[1]
}

/// `k` smallest `(margin, id)` pairs by full sort.
pub fn smallest_margins(queries: &[(u64, f64)], k: usize) -> Vec<u64> {
    let mut q = queries.to_vec();
    q.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    q.into_iter().take(k).map(|(id, _)| id).collect()
}

/// Brute-force highest cosine similarity over a gallery.
pub fn best_cosine(query: &[f64], gallery: &[(String, Vec<Vec<f64>>)]) -> Option<(String, f64)> {
    let cos = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        d / (na * nb)
    };
    let mut best: Option<(String, f64)> = None;
    for (id, vectors) in gallery {
        for v in vectors {
            let s = cos(query, v);
            let better = match &best {
                None => true,
                Some((bid, bs)) => s > *bs || (s == *bs && id < bid),
            };
            if better {
                best = Some((id.clone(), s));
            }
        }
    }
    best
}
