//! Local Outlier Factor.
//!
//! Conventions:
//!
//! * distances are Euclidean and computed exhaustively;
//! * the k-neighbourhood of a point contains every point whose distance is at
//!   most its k-distance, so ties can make it larger than `k`;
//! * local reachability densities are `1 / max(mean reach-dist, EPSILON)`,
//!   which keeps duplicate points finite and sends their LOF to 1;
//! * a point with fewer than `k` other points available uses all of them.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Lower bound on the mean reachability distance.
pub const EPSILON: f64 = 1e-12;

/// A point in the error-variation space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VPoint(pub Vec<f64>);

impl VPoint {
    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl From<Vec<f64>> for VPoint {
    fn from(v: Vec<f64>) -> Self {
        VPoint(v)
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// k-distance and k-neighbourhood of a point given its distances to the
/// candidate set.
fn neighbourhood(dists: &[(usize, f64)], k: usize) -> (f64, Vec<usize>) {
    let mut sorted: Vec<f64> = dists.iter().map(|&(_, d)| d).collect();
    sorted.sort_by(f64::total_cmp);
    let k = k.min(sorted.len());
    let kdist = sorted[k - 1];
    let members = dists.iter().filter(|&&(_, d)| d <= kdist).map(|&(j, _)| j).collect();
    (kdist, members)
}

/// LOF of `query` relative to `neighbors`.
///
/// Neighbour densities are computed within `neighbors` alone; the query only
/// enters through its own neighbourhood.
pub fn lof_score(query: &VPoint, neighbors: &[VPoint], k: usize) -> Result<f64> {
    let n = neighbors.len();
    if n < 2 {
        return Err(Error::config("LOF needs at least two reference points"));
    }
    if k == 0 || k > n {
        return Err(Error::config(format!("LOF neighbourhood size {k} outside 1..={n}")));
    }
    let dim = query.dim();
    if neighbors.iter().any(|p| p.dim() != dim) {
        return Err(Error::input("LOF points have mismatched dimensions"));
    }
    if query.0.iter().chain(neighbors.iter().flat_map(|p| p.0.iter())).any(|v| !v.is_finite()) {
        return Err(Error::input("LOF points must be finite"));
    }

    // pairwise distances among the reference set
    let mut pair = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = distance(neighbors[i].coords(), neighbors[j].coords());
            pair[i * n + j] = d;
            pair[j * n + i] = d;
        }
    }
    let hoods: Vec<(f64, Vec<usize>)> = (0..n)
        .map(|i| {
            let dists: Vec<(usize, f64)> = (0..n).filter(|&j| j != i).map(|j| (j, pair[i * n + j])).collect();
            neighbourhood(&dists, k)
        })
        .collect();
    let lrd = |mean_reach: f64| 1.0 / mean_reach.max(EPSILON);
    let neighbour_lrd: Vec<f64> = (0..n)
        .map(|i| {
            let members = &hoods[i].1;
            let reach: f64 = members.iter().map(|&o| hoods[o].0.max(pair[i * n + o])).sum();
            lrd(reach / members.len() as f64)
        })
        .collect();

    let qdists: Vec<(usize, f64)> =
        neighbors.iter().enumerate().map(|(j, p)| (j, distance(query.coords(), p.coords()))).collect();
    let (_, qhood) = neighbourhood(&qdists, k);
    let qreach: f64 = qhood.iter().map(|&o| hoods[o].0.max(qdists[o].1)).sum();
    let query_lrd = lrd(qreach / qhood.len() as f64);

    let ratio_sum: f64 = qhood.iter().map(|&o| neighbour_lrd[o] / query_lrd).sum();
    Ok(ratio_sum / qhood.len() as f64)
}
