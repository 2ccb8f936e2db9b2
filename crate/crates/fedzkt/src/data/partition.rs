//! Client partitioning: IID, quantity-based label skew, and Dirichlet label
//! skew. Every plan is fully determined by (scheme, seed, dataset).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum PartitionScheme {
    Iid,
    Quantity { classes_per_device: usize },
    Dirichlet { beta: f64 },
}

/// Disjoint per-device index lists over a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub scheme: PartitionScheme,
    pub seed: u64,
    pub assignments: Vec<Vec<usize>>,
}

impl PartitionPlan {
    pub fn device_count(&self) -> usize {
        self.assignments.len()
    }

    /// Count of distinct labels each device holds.
    pub fn distinct_classes_per_device(&self, ds: &LabeledDataset) -> Vec<usize> {
        self.assignments
            .iter()
            .map(|idx| {
                let mut seen = vec![false; ds.classes()];
                for &i in idx {
                    seen[ds.labels()[i]] = true;
                }
                seen.iter().filter(|s| **s).count()
            })
            .collect()
    }
}

fn check_devices(ds: &LabeledDataset, devices: usize) -> Result<()> {
    if devices == 0 {
        return Err(Error::InvalidArgument("need at least one device".into()));
    }
    if devices > ds.len() {
        return Err(Error::InvalidArgument(format!(
            "{devices} devices but only {} samples",
            ds.len()
        )));
    }
    Ok(())
}

/// Splits `items` into `parts` consecutive chunks whose sizes differ by at
/// most one (earlier chunks take the remainder).
fn split_even(items: &[usize], parts: usize) -> Vec<Vec<usize>> {
    let base = items.len() / parts;
    let extra = items.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let size = base + usize::from(p < extra);
        out.push(items[start..start + size].to_vec());
        start += size;
    }
    out
}

/// Dispatches to the partitioner for `scheme`.
pub fn make_partition(
    ds: &LabeledDataset,
    scheme: &PartitionScheme,
    devices: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    match *scheme {
        PartitionScheme::Iid => partition_iid(ds, devices, seed),
        PartitionScheme::Quantity { classes_per_device } => {
            partition_quantity_skew(ds, devices, classes_per_device, seed)
        }
        PartitionScheme::Dirichlet { beta } => partition_dirichlet(ds, devices, beta, seed),
    }
}

/// Random permutation split into near-equal chunks.
pub fn partition_iid(ds: &LabeledDataset, devices: usize, seed: u64) -> Result<PartitionPlan> {
    check_devices(ds, devices)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..ds.len()).collect();
    indices.shuffle(&mut rng);
    Ok(PartitionPlan {
        scheme: PartitionScheme::Iid,
        seed,
        assignments: split_even(&indices, devices),
    })
}

/// Each device owns exactly `classes_per_device` classes, assigned
/// round-robin over a seeded class permutation; each class's samples are
/// split evenly among the devices that own it.
pub fn partition_quantity_skew(
    ds: &LabeledDataset,
    devices: usize,
    classes_per_device: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    check_devices(ds, devices)?;
    let classes = ds.classes();
    if classes_per_device == 0 || classes_per_device > classes {
        return Err(Error::InvalidArgument(format!(
            "classes_per_device must be in [1, {classes}], got {classes_per_device}"
        )));
    }
    if devices * classes_per_device < classes {
        return Err(Error::InvalidArgument(format!(
            "{devices} devices x {classes_per_device} classes cannot cover {classes} classes"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut class_order: Vec<usize> = (0..classes).collect();
    class_order.shuffle(&mut rng);

    // Walk the permutation cyclically; device k takes the next C entries.
    let mut owners: Vec<Vec<usize>> = vec![Vec::new(); classes];
    let mut cursor = 0usize;
    for device in 0..devices {
        for _ in 0..classes_per_device {
            owners[class_order[cursor % classes]].push(device);
            cursor += 1;
        }
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &label) in ds.labels().iter().enumerate() {
        by_class[label].push(i);
    }
    let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); devices];
    for class in 0..classes {
        let mut samples = std::mem::take(&mut by_class[class]);
        samples.shuffle(&mut rng);
        for (chunk, &device) in split_even(&samples, owners[class].len())
            .into_iter()
            .zip(&owners[class])
        {
            assignments[device].extend(chunk);
        }
    }
    for a in &mut assignments {
        a.sort_unstable();
    }
    Ok(PartitionPlan {
        scheme: PartitionScheme::Quantity { classes_per_device },
        seed,
        assignments,
    })
}

/// For each class, device proportions are drawn from Dirichlet(beta) via
/// normalized Gamma(beta, 1) draws; counts are rounded with the
/// largest-remainder method so each class's counts sum exactly.
pub fn partition_dirichlet(
    ds: &LabeledDataset,
    devices: usize,
    beta: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    check_devices(ds, devices)?;
    if beta <= 0.0 || !beta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "dirichlet beta must be positive and finite, got {beta}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Gamma::new(beta, 1.0)
        .map_err(|e| Error::InvalidArgument(format!("gamma({beta}, 1): {e}")))?;

    let classes = ds.classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &label) in ds.labels().iter().enumerate() {
        by_class[label].push(i);
    }
    let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); devices];
    for class_samples in by_class.iter_mut() {
        let n = class_samples.len();
        if n == 0 {
            // Proportions are still drawn so the stream stays aligned
            // across datasets with the same class count.
            for _ in 0..devices {
                let _: f64 = gamma.sample(&mut rng);
            }
            continue;
        }
        let mut draws: Vec<f64> = (0..devices).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = draws.iter().sum();
        if total <= 0.0 {
            // All draws underflowed (tiny beta); fall back to uniform.
            draws.fill(1.0);
        }
        let total: f64 = draws.iter().sum();
        let counts = largest_remainder(&draws, total, n);
        class_samples.shuffle(&mut rng);
        let mut start = 0;
        for (device, &count) in counts.iter().enumerate() {
            assignments[device].extend(&class_samples[start..start + count]);
            start += count;
        }
    }
    for a in &mut assignments {
        a.sort_unstable();
    }
    Ok(PartitionPlan {
        scheme: PartitionScheme::Dirichlet { beta },
        seed,
        assignments,
    })
}

/// Integer counts summing to `n`, proportional to `weights / total`.
/// Remainders are broken by largest fractional part, then lowest index.
fn largest_remainder(weights: &[f64], total: f64, n: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = Vec::with_capacity(weights.len());
    let mut fractions: Vec<(f64, usize)> = Vec::with_capacity(weights.len());
    let mut assigned = 0usize;
    for (i, w) in weights.iter().enumerate() {
        let ideal = w / total * n as f64;
        let floor = ideal.floor() as usize;
        counts.push(floor);
        assigned += floor;
        fractions.push((ideal - floor as f64, i));
    }
    fractions.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for &(_, i) in fractions.iter().take(n - assigned) {
        counts[i] += 1;
    }
    counts
}
