//! Synthetic data, client/server splits and non-IID partitioning.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attack::BackdoorSpec;
use crate::ml::LabeledDataset;
use crate::seed;
use crate::{Error, Result};

/// Distance of every class mean from the origin, in units of the noise scale
/// at `cluster_spread = 1`.
const MEAN_RADIUS: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub num_clients: usize,
    pub dirichlet_alpha: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    /// Fraction of the data held jointly by the clients, in `(0, 1]`.
    pub client_share: f64,
    pub seed: u64,
}

/// Gaussian blobs, one isotropic cluster per class.
///
/// Class means lie on a sphere of radius 3 around the origin and each
/// coordinate carries `N(0, cluster_spread^2)` noise. Train and test sets are
/// independent draws with `samples_per_class` rows per class each.
pub fn make_synthetic(
    num_classes: usize,
    dim: usize,
    samples_per_class: usize,
    cluster_spread: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if num_classes < 2 {
        return Err(Error::config("synthetic data needs at least two classes"));
    }
    if dim == 0 || samples_per_class == 0 {
        return Err(Error::config("dimension and samples per class must be positive"));
    }
    if !(cluster_spread.is_finite() && cluster_spread > 0.0) {
        return Err(Error::config("cluster spread must be positive"));
    }
    let mut mean_rng = seed::stream(seed, "class-means", &[]);
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| mean_rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x / norm * MEAN_RADIUS).collect()
        })
        .collect();
    let draw = |label: &str| -> Result<LabeledDataset> {
        let mut rng = seed::stream(seed, label, &[]);
        let mut features = Vec::with_capacity(num_classes * samples_per_class * dim);
        let mut labels = Vec::with_capacity(num_classes * samples_per_class);
        for (class, mean) in means.iter().enumerate() {
            for _ in 0..samples_per_class {
                features.extend(mean.iter().map(|m| m + cluster_spread * rng.sample::<f64, _>(StandardNormal)));
                labels.push(class);
            }
        }
        LabeledDataset::new(dim, num_classes, features, labels)
    };
    Ok((draw("train-samples")?, draw("test-samples")?))
}

/// Seeded shuffle, then the first `floor(client_share * |D|)` rows go to the
/// client pool and the rest to the server.
pub fn split_clients_server(data: &LabeledDataset, split: &SplitConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(split.client_share > 0.0 && split.client_share <= 1.0) {
        return Err(Error::config("client share must lie in (0, 1]"));
    }
    if data.is_empty() {
        return Err(Error::input("cannot split an empty dataset"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut seed::stream(split.seed, "split", &[]));
    // the epsilon absorbs products such as 0.29 * 100 = 28.999999999999996
    let cut = ((split.client_share * data.len() as f64) + 1e-9).floor() as usize;
    let cut = cut.min(data.len());
    Ok((data.subset(&order[..cut]), data.subset(&order[cut..])))
}

/// Non-IID partition: for every class, client proportions are drawn from
/// `Dirichlet(alpha, ..., alpha)` and the class samples are dealt out with
/// largest-remainder rounding. Shards may be empty.
pub fn dirichlet_partition(data: &LabeledDataset, config: &PartitionConfig) -> Result<Vec<LabeledDataset>> {
    if config.num_clients == 0 {
        return Err(Error::config("need at least one client"));
    }
    if !(config.dirichlet_alpha.is_finite() && config.dirichlet_alpha > 0.0) {
        return Err(Error::config("dirichlet alpha must be positive"));
    }
    if data.is_empty() {
        return Err(Error::input("cannot partition an empty dataset"));
    }
    let gamma =
        Gamma::new(config.dirichlet_alpha, 1.0).map_err(|e| Error::config(format!("invalid dirichlet alpha: {e}")))?;
    let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); config.num_clients];
    for class in 0..data.num_classes() {
        let mut members: Vec<usize> = (0..data.len()).filter(|&i| data.label(i) == class).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut seed::stream(config.seed, "dirichlet-order", &[class as u64]));
        let mut rng = seed::stream(config.seed, "dirichlet", &[class as u64]);
        let draws: Vec<f64> = (0..config.num_clients).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = draws.iter().sum();
        let props: Vec<f64> = if total > 0.0 && total.is_finite() {
            draws.iter().map(|d| d / total).collect()
        } else {
            // all draws underflowed, which only happens for tiny alpha
            vec![1.0 / config.num_clients as f64; config.num_clients]
        };
        let counts = largest_remainder(&props, members.len());
        let mut start = 0;
        for (client, &c) in counts.iter().enumerate() {
            assignment[client].extend_from_slice(&members[start..start + c]);
            start += c;
        }
    }
    Ok(assignment.iter().map(|idx| data.subset(idx)).collect())
}

/// Integer counts summing to `total` that follow `props` as closely as
/// possible. Ties in the remainders go to the lower index.
pub fn largest_remainder(props: &[f64], total: usize) -> Vec<usize> {
    let quotas: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    if assigned <= total {
        for &i in order.iter().cycle().take(total - assigned) {
            counts[i] += 1;
        }
    } else {
        // rounding pushed the floors above the total; take from the smallest remainders
        let mut excess = assigned - total;
        for &i in order.iter().rev() {
            if excess == 0 {
                break;
            }
            if counts[i] > 0 {
                counts[i] -= 1;
                excess -= 1;
            }
        }
    }
    counts
}

/// Copy of `data` where every backdoor instance is relabeled to the target.
/// Features are never modified.
pub fn poison_dataset(data: &LabeledDataset, spec: &BackdoorSpec) -> Result<LabeledDataset> {
    spec.validate(data.num_classes(), data.dim())?;
    Ok(data.relabel(|x, y| if spec.matches(x, y) { spec.target } else { y }))
}
