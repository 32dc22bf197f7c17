//! Synthetic non-IID segmentation federations.
//!
//! Every client belongs to one cluster. A cluster fixes how its images look:
//! how many Gaussian blobs, their radii, the intensity gain they are rendered
//! with, the background noise and a spatial offset of the blob centers. The
//! mask is the blob support (profile >= 1/2). Each client draws from its own
//! random stream, so datasets do not depend on generation order.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{streams, FlatParams, RngStream};
use crate::transport::{deserialize, serialize};

const MIN_FOREGROUND: f64 = 0.02;
const MAX_FOREGROUND: f64 = 0.9;
const MAX_ATTEMPTS: usize = 1000;

/// Generative parameters shared by every client in a cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterParams {
    /// inclusive range of blobs per image
    pub blob_count: [usize; 2],
    /// radius range in pixels
    pub radius: [f64; 2],
    pub gain: f64,
    /// standard deviation of additive Gaussian background noise
    pub noise: f64,
    /// shift of the blob-center box from the canvas center, in pixels
    pub offset: [f64; 2],
}

impl ClusterParams {
    fn validate(&self, side: usize) -> Result<()> {
        let half = side as f64 / 2.0;
        if self.blob_count[0] == 0 || self.blob_count[0] > self.blob_count[1] {
            return Err(Error::invalid(format!("bad blob_count range {:?}", self.blob_count)));
        }
        if !(self.radius[0] > 0.0 && self.radius[0] <= self.radius[1]) {
            return Err(Error::invalid(format!("bad radius range {:?}", self.radius)));
        }
        if self.radius[1] > half {
            return Err(Error::invalid(format!(
                "radius {} exceeds half the {side}px canvas",
                self.radius[1]
            )));
        }
        if !(self.gain > 0.0 && self.gain.is_finite()) {
            return Err(Error::invalid(format!("gain must be positive, got {}", self.gain)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid(format!("noise must be >= 0, got {}", self.noise)));
        }
        if self.offset.iter().any(|o| !(o.abs() <= half / 2.0)) {
            return Err(Error::invalid(format!(
                "offset {:?} would push blob centers off the canvas",
                self.offset
            )));
        }
        Ok(())
    }
}

/// Layout of a synthetic federation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationSpec {
    pub num_clients: usize,
    pub client_sizes: Vec<usize>,
    /// cluster index of each client
    pub cluster_of: Vec<usize>,
    pub clusters: Vec<ClusterParams>,
    pub mask_side: usize,
    pub seed: u64,
}

impl Default for FederationSpec {
    /// Four clients of unequal size in two clusters that differ in gain,
    /// noise and blob placement.
    fn default() -> Self {
        FederationSpec {
            num_clients: 4,
            client_sizes: vec![100, 40, 80, 120],
            cluster_of: vec![0, 1, 0, 1],
            clusters: vec![
                ClusterParams {
                    blob_count: [1, 2],
                    radius: [1.5, 3.0],
                    gain: 0.5,
                    noise: 0.05,
                    offset: [-2.0, -2.0],
                },
                ClusterParams {
                    blob_count: [1, 2],
                    radius: [1.5, 3.0],
                    gain: 1.5,
                    noise: 0.15,
                    offset: [2.0, 2.0],
                },
            ],
            mask_side: 16,
            seed: 0,
        }
    }
}

impl FederationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients < 2 {
            return Err(Error::invalid("a federation needs at least 2 clients"));
        }
        if self.client_sizes.len() != self.num_clients || self.cluster_of.len() != self.num_clients {
            return Err(Error::invalid(format!(
                "expected {} client sizes and cluster labels, got {} and {}",
                self.num_clients,
                self.client_sizes.len(),
                self.cluster_of.len()
            )));
        }
        if let Some(n) = self.client_sizes.iter().find(|&&n| n < 2) {
            return Err(Error::invalid(format!("client size {n} is below 2")));
        }
        if let Some(c) = self.cluster_of.iter().find(|&&c| c >= self.clusters.len()) {
            return Err(Error::invalid(format!("client assigned to unknown cluster {c}")));
        }
        if self.mask_side < 4 {
            return Err(Error::invalid("mask_side must be at least 4"));
        }
        self.clusters.iter().try_for_each(|c| c.validate(self.mask_side))
    }

    pub fn pixels(&self) -> usize {
        self.mask_side * self.mask_side
    }
}

/// One image and its binary mask, both flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Vec<f64>,
    pub mask: Vec<f64>,
}

impl Sample {
    pub fn foreground_fraction(&self) -> f64 {
        self.mask.iter().sum::<f64>() / self.mask.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub n_i: usize,
}

/// Train-set size for `n` samples: `round(0.8 n)`, kept within `1..n` so
/// both sides are non-empty.
pub fn train_count(n: usize) -> usize {
    ((8 * n + 5) / 10).clamp(1, n.saturating_sub(1).max(1))
}

/// Seeded shuffle, then the first `train_count` samples train.
pub fn split_train_test(mut samples: Vec<Sample>, stream: &mut RngStream) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if samples.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 samples to split, got {}",
            samples.len()
        )));
    }
    stream.shuffle(&mut samples);
    let test = samples.split_off(train_count(samples.len()));
    Ok((samples, test))
}

fn render(cluster: &ClusterParams, side: usize, rng: &mut RngStream) -> Sample {
    let half = side as f64 / 2.0;
    let blobs: Vec<(f64, f64, f64)> = (0..rng.uniform_int(cluster.blob_count[0], cluster.blob_count[1]))
        .map(|_| {
            let cx = half + cluster.offset[0] + rng.uniform(-half / 2.0, half / 2.0);
            let cy = half + cluster.offset[1] + rng.uniform(-half / 2.0, half / 2.0);
            let r = rng.uniform(cluster.radius[0], cluster.radius[1]);
            (cx, cy, r)
        })
        .collect();
    let mut image = Vec::with_capacity(side * side);
    let mut mask = Vec::with_capacity(side * side);
    for py in 0..side {
        for px in 0..side {
            let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
            let profile = blobs
                .iter()
                .map(|&(cx, cy, r)| (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * r * r)).exp())
                .fold(0.0, f64::max);
            mask.push(if profile >= 0.5 { 1.0 } else { 0.0 });
            let noise = cluster.noise * rng.standard_normal();
            image.push((cluster.gain * profile + noise).clamp(0.0, 1.0));
        }
    }
    Sample { image, mask }
}

/// Draws `count` samples for one cluster, rejecting masks whose foreground
/// fraction falls outside `[0.02, 0.9]`.
pub fn generate_samples(cluster: &ClusterParams, side: usize, count: usize, rng: &mut RngStream) -> Result<Vec<Sample>> {
    cluster.validate(side)?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut attempts = 0;
        loop {
            let s = render(cluster, side, rng);
            let frac = s.foreground_fraction();
            if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) {
                out.push(s);
                break;
            }
            attempts += 1;
            if attempts == MAX_ATTEMPTS {
                return Err(Error::invalid(format!(
                    "cluster parameters cannot produce foreground fractions in [{MIN_FOREGROUND}, {MAX_FOREGROUND}]"
                )));
            }
        }
    }
    Ok(out)
}

/// Generates every client's dataset. Deterministic in `spec.seed`.
pub fn generate_federation(spec: &FederationSpec) -> Result<Vec<ClientDataset>> {
    spec.validate()?;
    (0..spec.num_clients)
        .into_par_iter()
        .map(|i| generate_client(spec, i))
        .collect()
}

pub fn generate_client(spec: &FederationSpec, client: usize) -> Result<ClientDataset> {
    let cluster = &spec.clusters[spec.cluster_of[client]];
    let n = spec.client_sizes[client];
    let mut rng = RngStream::new(spec.seed, streams::client_data(client));
    let samples = generate_samples(cluster, spec.mask_side, n, &mut rng)?;
    let (train, test) = split_train_test(samples, &mut RngStream::new(spec.seed, streams::client_split(client)))?;
    Ok(ClientDataset { train, test, n_i: n })
}

/// Pixel-wise mean image.
pub fn mean_image(samples: &[Sample]) -> Vec<f64> {
    let mut mean = vec![0.0; samples.first().map_or(0, |s| s.image.len())];
    for s in samples {
        mean.iter_mut().zip(&s.image).for_each(|(m, v)| *m += v);
    }
    let n = samples.len().max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

fn flatten(samples: &[Sample], pick: fn(&Sample) -> &Vec<f64>) -> Vec<f64> {
    samples.iter().flat_map(|s| pick(s).iter().copied()).collect()
}

fn client_to_params(d: &ClientDataset, side: usize) -> Result<FlatParams> {
    FlatParams::concat(vec![
        (1, vec![side as f64, d.train.len() as f64, d.test.len() as f64]),
        (2, flatten(&d.train, |s| &s.image)),
        (3, flatten(&d.train, |s| &s.mask)),
        (4, flatten(&d.test, |s| &s.image)),
        (5, flatten(&d.test, |s| &s.mask)),
    ])
}

fn client_from_params(p: &FlatParams) -> Result<ClientDataset> {
    let layers = p.split();
    if layers.len() != 5 || layers[0].1.len() != 3 {
        return Err(Error::decode("dataset", "expected 5 layers with a 3-value header"));
    }
    let meta = &layers[0].1;
    let (side, n_train, n_test) = (meta[0] as usize, meta[1] as usize, meta[2] as usize);
    let px = side * side;
    let unpack = |images: &[f64], masks: &[f64], n: usize| -> Result<Vec<Sample>> {
        if images.len() != n * px || masks.len() != n * px {
            return Err(Error::decode("dataset", "sample block has the wrong length"));
        }
        Ok(images
            .chunks_exact(px.max(1))
            .zip(masks.chunks_exact(px.max(1)))
            .map(|(i, m)| Sample {
                image: i.to_vec(),
                mask: m.to_vec(),
            })
            .collect())
    };
    let train = unpack(&layers[1].1, &layers[2].1, n_train)?;
    let test = unpack(&layers[3].1, &layers[4].1, n_test)?;
    Ok(ClientDataset {
        n_i: train.len() + test.len(),
        train,
        test,
    })
}

/// Writes a federation snapshot: a little-endian u32 client count, then per
/// client a u64 byte length followed by one serialized parameter record.
pub fn write_federation(path: &Path, datasets: &[ClientDataset], mask_side: usize) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&(datasets.len() as u32).to_le_bytes());
    for d in datasets {
        let record = serialize(&client_to_params(d, mask_side)?);
        bytes.extend_from_slice(&(record.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&record);
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| Error::io(path, e))
}

pub fn read_federation(path: &Path) -> Result<Vec<ClientDataset>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let take = |bytes: &[u8], at: usize, n: usize, field: &'static str| -> Result<Vec<u8>> {
        bytes
            .get(at..at + n)
            .map(<[u8]>::to_vec)
            .ok_or_else(|| Error::decode(field, "truncated"))
    };
    let count = u32::from_le_bytes(take(&bytes, 0, 4, "client count")?.try_into().unwrap()) as usize;
    let mut at = 4;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u64::from_le_bytes(take(&bytes, at, 8, "record length")?.try_into().unwrap()) as usize;
        at += 8;
        let record = take(&bytes, at, len, "record")?;
        at += len;
        out.push(client_from_params(&deserialize(&record)?)?);
    }
    if at != bytes.len() {
        return Err(Error::decode("trailer", "unexpected bytes after the last record"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    fn dummy(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| Sample {
                image: vec![i as f64],
                mask: vec![1.0],
            })
            .collect()
    }

    #[test]
    fn split_counts() {
        let mut rng = RngStream::new(0, 0);
        let (tr, te) = split_train_test(dummy(10), &mut rng).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
        let (tr, te) = split_train_test(dummy(5), &mut rng).unwrap();
        assert_eq!((tr.len(), te.len()), (4, 1));
        let (tr, te) = split_train_test(dummy(2), &mut rng).unwrap();
        assert_eq!((tr.len(), te.len()), (1, 1));
        assert!(split_train_test(dummy(1), &mut rng).is_err());
        for n in 2..200 {
            let t = train_count(n);
            assert!(t >= 1 && t < n);
            if n >= 5 {
                assert_eq!(t, (0.8 * n as f64).round() as usize);
            }
        }
    }

    #[test]
    fn split_is_seeded() {
        let a = split_train_test(dummy(20), &mut RngStream::new(4, 4)).unwrap();
        let b = split_train_test(dummy(20), &mut RngStream::new(4, 4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn deterministic_generation() {
        let spec = FederationSpec::default();
        assert_eq!(generate_federation(&spec).unwrap(), generate_federation(&spec).unwrap());
    }

    #[test]
    fn client_datasets_do_not_depend_on_order() {
        let spec = FederationSpec::default();
        let all = generate_federation(&spec).unwrap();
        for i in (0..spec.num_clients).rev() {
            assert_eq!(generate_client(&spec, i).unwrap(), all[i]);
        }
    }

    #[test]
    fn sample_invariants_hold_at_scale() {
        let spec = FederationSpec {
            client_sizes: vec![2500; 4],
            ..Default::default()
        };
        let data = generate_federation(&spec).unwrap();
        let mut count = 0;
        for d in &data {
            assert_eq!(d.train.len() + d.test.len(), d.n_i);
            assert_eq!(d.train.len(), 2000);
            for s in d.train.iter().chain(&d.test) {
                assert!(s.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
                assert!(s.mask.iter().all(|&v| v == 0.0 || v == 1.0));
                let f = s.foreground_fraction();
                assert!((0.02..=0.9).contains(&f));
                count += 1;
            }
        }
        assert!(count >= 10_000);
    }

    #[test]
    fn rejects_infeasible_specs() {
        let mut spec = FederationSpec::default();
        spec.clusters[0].radius = [1.0, 9.0];
        assert!(generate_federation(&spec).is_err());
        let mut spec = FederationSpec::default();
        spec.client_sizes[2] = 1;
        assert!(generate_federation(&spec).is_err());
        let mut spec = FederationSpec::default();
        spec.cluster_of[0] = 5;
        assert!(generate_federation(&spec).is_err());
        let mut spec = FederationSpec::default();
        spec.clusters[1].offset = [7.0, 0.0];
        assert!(generate_federation(&spec).is_err());
        let mut spec = FederationSpec::default();
        spec.num_clients = 1;
        assert!(generate_federation(&spec).is_err());
        // blobs too small to ever cover 2% of the canvas
        let mut spec = FederationSpec::default();
        spec.clusters[0].radius = [0.1, 0.2];
        spec.clusters[0].blob_count = [1, 1];
        assert!(generate_federation(&spec).is_err());
    }

    /// Bootstrap spread of a client's mean image: RMS distance between the
    /// mean of a resample and the full-sample mean.
    fn bootstrap_spread(samples: &[Sample], rng: &mut RngStream) -> f64 {
        let mean = mean_image(samples);
        let reps = 200;
        let total: f64 = (0..reps)
            .map(|_| {
                let resample: Vec<Sample> = (0..samples.len())
                    .map(|_| samples[rng.uniform_int(0, samples.len() - 1)].clone())
                    .collect();
                dist(&mean_image(&resample), &mean).powi(2)
            })
            .sum();
        (total / reps as f64).sqrt()
    }

    fn all_samples(d: &ClientDataset) -> Vec<Sample> {
        d.train.iter().chain(&d.test).cloned().collect()
    }

    #[test]
    fn identical_clusters_give_indistinguishable_clients() {
        let mut spec = FederationSpec::default();
        spec.clusters[1] = spec.clusters[0].clone();
        let data = generate_federation(&spec).unwrap();
        let samples: Vec<Vec<Sample>> = data.iter().map(all_samples).collect();
        let mut rng = RngStream::new(1, 1);
        let spreads: Vec<f64> = samples.iter().map(|s| bootstrap_spread(s, &mut rng)).collect();
        for i in 0..samples.len() {
            for j in i + 1..samples.len() {
                let d = dist(&mean_image(&samples[i]), &mean_image(&samples[j]));
                let bound = 3.0 * (spreads[i].powi(2) + spreads[j].powi(2)).sqrt();
                assert!(d < bound, "clients {i},{j}: {d} >= {bound}");
            }
        }
    }

    fn min_cross_max_within(spec: &FederationSpec) -> (f64, f64) {
        let data = generate_federation(spec).unwrap();
        let means: Vec<Vec<f64>> = data.iter().map(|d| mean_image(&all_samples(d))).collect();
        let (mut cross, mut within) = (f64::INFINITY, 0.0f64);
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                let d = dist(&means[i], &means[j]);
                if spec.cluster_of[i] == spec.cluster_of[j] {
                    within = within.max(d);
                } else {
                    cross = cross.min(d);
                }
            }
        }
        (cross, within)
    }

    fn gain_gap_spec(low: f64, high: f64) -> FederationSpec {
        let mut spec = FederationSpec::default();
        for c in &mut spec.clusters {
            c.offset = [0.0, 0.0];
            c.noise = 0.05;
        }
        spec.clusters[0].gain = low;
        spec.clusters[1].gain = high;
        spec
    }

    #[test]
    fn separated_gains_separate_clusters() {
        let (cross, within) = min_cross_max_within(&gain_gap_spec(0.5, 1.5));
        assert!(cross > within, "cross {cross} within {within}");
    }

    #[test]
    fn separation_grows_with_gain_gap() {
        let gaps = [(0.9, 1.1), (0.7, 1.3), (0.5, 1.5)];
        let cross: Vec<f64> = gaps.iter().map(|&(l, h)| min_cross_max_within(&gain_gap_spec(l, h)).0).collect();
        assert!(cross.windows(2).all(|w| w[1] >= w[0]), "{cross:?}");
    }

    #[test]
    fn snapshot_round_trip() {
        let spec = FederationSpec {
            client_sizes: vec![6, 5, 4, 3],
            ..Default::default()
        };
        let data = generate_federation(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fed.fsca");
        write_federation(&path, &data, spec.mask_side).unwrap();
        assert_eq!(read_federation(&path).unwrap(), data);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_federation(&path).is_err());
    }
}
