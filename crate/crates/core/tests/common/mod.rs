#![allow(dead_code)]

use baffle_sim::ml::{LabeledDataset, Model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        s += d * d;
    }
    s.sqrt()
}

/// Distance from `p` to its k-th nearest point among `others`.
fn k_distance(p: &[f64], others: &[&[f64]], k: usize) -> f64 {
    let mut ds: Vec<f64> = others.iter().map(|o| dist(p, o)).collect();
    ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ds[k.min(ds.len()) - 1]
}

fn k_neighbours<'a>(p: &[f64], others: &[&'a [f64]], k: usize) -> Vec<&'a [f64]> {
    let kd = k_distance(p, others, k);
    others.iter().copied().filter(|o| dist(p, o) <= kd).collect()
}

/// `set` without the element at `skip`.
fn without<'a>(set: &[&'a [f64]], skip: usize) -> Vec<&'a [f64]> {
    set.iter().enumerate().filter(|&(i, _)| i != skip).map(|(_, p)| *p).collect()
}

fn index_of(set: &[&[f64]], p: &[f64]) -> usize {
    set.iter().position(|q| std::ptr::eq(*q, p)).unwrap()
}

/// Local reachability density of `set[i]` within `set`.
fn lrd_in(set: &[&[f64]], i: usize, k: usize) -> f64 {
    let others = without(set, i);
    let hood = k_neighbours(set[i], &others, k);
    let mut total = 0.0;
    for o in &hood {
        let j = index_of(set, o);
        let o_kd = k_distance(set[j], &without(set, j), k);
        total += o_kd.max(dist(set[i], o));
    }
    1.0 / (total / hood.len() as f64).max(1e-12)
}

/// Textbook LOF of `query` against `neighbours`, recomputing everything
/// from scratch for every point.
pub fn naive_lof(query: &[f64], neighbours: &[Vec<f64>], k: usize) -> f64 {
    let set: Vec<&[f64]> = neighbours.iter().map(|v| v.as_slice()).collect();
    let hood = k_neighbours(query, &set, k);
    let mut reach = 0.0;
    for o in &hood {
        let j = index_of(&set, o);
        let o_kd = k_distance(set[j], &without(&set, j), k);
        reach += o_kd.max(dist(query, o));
    }
    let lrd_q = 1.0 / (reach / hood.len() as f64).max(1e-12);
    let mut ratio = 0.0;
    for o in &hood {
        ratio += lrd_in(&set, index_of(&set, o), k) / lrd_q;
    }
    ratio / hood.len() as f64
}

/// Logits by explicit matrix arithmetic over the documented layout.
pub fn forward_oracle(model: &Model, x: &[f64]) -> Vec<f64> {
    let arch = model.arch();
    let p = model.params();
    let mut dims = vec![arch.input_dim];
    dims.extend(&arch.hidden_dims);
    dims.push(arch.num_classes);
    let mut a = x.to_vec();
    let mut off = 0;
    for layer in 0..dims.len() - 1 {
        let (n_in, n_out) = (dims[layer], dims[layer + 1]);
        let mut z = vec![0.0; n_out];
        for o in 0..n_out {
            let mut acc = p[off + n_in * n_out + o];
            for i in 0..n_in {
                acc += p[off + o * n_in + i] * a[i];
            }
            z[o] = acc;
        }
        off += n_in * n_out + n_out;
        if layer + 2 < dims.len() {
            for v in z.iter_mut() {
                *v = v.tanh();
            }
        }
        a = z;
    }
    a
}

pub fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Confusion matrix `m[true][pred]` counted sample by sample.
pub fn confusion(model: &Model, data: &LabeledDataset) -> Vec<Vec<usize>> {
    let c = data.num_classes();
    let mut m = vec![vec![0; c]; c];
    for i in 0..data.len() {
        let pred = argmax_lowest(&forward_oracle(model, data.row(i)));
        m[data.label(i)][pred] += 1;
    }
    m
}

/// `(source_errors, target_errors)` from a confusion matrix.
pub fn profile_from_confusion(m: &[Vec<usize>], n: usize) -> (Vec<f64>, Vec<f64>) {
    let c = m.len();
    let mut src = vec![0.0; c];
    let mut tgt = vec![0.0; c];
    for t in 0..c {
        for p in 0..c {
            if t != p {
                src[t] += m[t][p] as f64 / n as f64;
                tgt[p] += m[t][p] as f64 / n as f64;
            }
        }
    }
    (src, tgt)
}

pub fn random_points(rng: &mut impl Rng, n: usize, dim: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| rng.random_range(-scale..scale)).collect()).collect()
}

pub fn random_dataset(rng: &mut impl Rng, n: usize, dim: usize, classes: usize) -> LabeledDataset {
    let rows = random_points(rng, n, dim, 2.0);
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    LabeledDataset::from_rows(&rows, labels, classes).unwrap()
}

pub fn random_model(rng: &mut impl Rng, arch: baffle_sim::ml::Architecture) -> Model {
    let params = (0..arch.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
    Model::from_params(arch, params).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Two well separated 2-D blobs, `per_class` points each.
pub fn separable_blobs(per_class: usize, seed: u64) -> LabeledDataset {
    let mut r = rng(seed);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for c in 0..2 {
        let cx = if c == 0 { -3.0 } else { 3.0 };
        for _ in 0..per_class {
            rows.push(vec![cx + r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]);
            labels.push(c);
        }
    }
    LabeledDataset::from_rows(&rows, labels, 2).unwrap()
}
