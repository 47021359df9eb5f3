//! Problem instances: generation under the clustered and uniform
//! distributions, pairwise distances, and the JSON instance/dataset files.
//!
//! Node layout is fixed: index 0 is the depot, `1..=n` are pickups and
//! `n+1..=2n` are deliveries, with pickup `i` paired to delivery `i + n`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::error::{Error, Result};
use crate::rng;

pub const INSTANCE_FILE_VERSION: u32 = 1;

const CLUSTER_STD: f64 = 0.1;
const PICKUP_CENTER: [f64; 2] = [0.25, 0.25];
const DELIVERY_CENTER: [f64; 2] = [0.75, 0.75];

/// Role of a node; the discriminant doubles as the cluster id fed to the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum NodeRole {
    Depot = 0,
    Pickup = 1,
    Delivery = 2,
}

impl NodeRole {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(NodeRole::Depot),
            1 => Some(NodeRole::Pickup),
            2 => Some(NodeRole::Delivery),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    Clustered,
    Uniform,
}

impl Distribution {
    pub fn as_str(self) -> &'static str {
        match self {
            Distribution::Clustered => "clustered",
            Distribution::Uniform => "uniform",
        }
    }
}

impl std::fmt::Display for Distribution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Distribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "clustered" | "cluster" => Ok(Distribution::Clustered),
            "uniform" => Ok(Distribution::Uniform),
            other => Err(Error::Config(format!("unknown distribution {other:?}"))),
        }
    }
}

/// A single-vehicle PDP instance with `n` pickup/delivery pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PdpInstance {
    n: usize,
    coords: Vec<[f64; 2]>,
    roles: Vec<NodeRole>,
    distribution: Distribution,
    seed: u64,
    speed: f64,
}

impl PdpInstance {
    /// Builds an instance from explicit coordinates (depot first, then the
    /// `n` pickups, then the `n` deliveries).
    pub fn from_coords(coords: Vec<[f64; 2]>, distribution: Distribution, seed: u64) -> Result<Self> {
        if coords.len() < 3 || coords.len().is_multiple_of(2) {
            return Err(Error::InvalidSize(format!(
                "expected 2n+1 nodes with n >= 1, got {}",
                coords.len()
            )));
        }
        if coords.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::InvalidSize("non-finite coordinate".into()));
        }
        let n = (coords.len() - 1) / 2;
        Ok(Self {
            n,
            roles: roles_for(n),
            coords,
            distribution,
            seed,
            speed: 1.0,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Total node count, `2n + 1`.
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn roles(&self) -> &[NodeRole] {
        &self.roles
    }

    pub fn role(&self, node: usize) -> NodeRole {
        self.roles[node]
    }

    pub fn distribution(&self) -> Distribution {
        self.distribution
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Vehicle speed; fixed to 1 so travel time equals distance.
    pub fn speed(&self) -> f64 {
        self.speed
    }

    pub fn pickups(&self) -> std::ops::RangeInclusive<usize> {
        1..=self.n
    }

    pub fn is_pickup(&self, node: usize) -> bool {
        (1..=self.n).contains(&node)
    }

    pub fn is_delivery(&self, node: usize) -> bool {
        (self.n + 1..=2 * self.n).contains(&node)
    }

    /// The other member of a customer's pair.
    pub fn partner(&self, node: usize) -> usize {
        debug_assert!(node >= 1 && node <= 2 * self.n);
        if node <= self.n {
            node + self.n
        } else {
            node - self.n
        }
    }

    /// Short identity string `dist:n:seed`.
    pub fn reference(&self) -> String {
        format!("{}:{}:{}", self.distribution, self.n, self.seed)
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        euclid(self.coords[i], self.coords[j])
    }

    pub fn distance_matrix(&self) -> DistanceMatrix {
        distance_matrix(self)
    }

    /// Regenerates the instance from its `(n, distribution, seed)` identity.
    pub fn generate(n: usize, distribution: Distribution, seed: u64) -> Result<Self> {
        match distribution {
            Distribution::Clustered => gen_clustered(n, seed),
            Distribution::Uniform => gen_uniform(n, seed),
        }
    }

    /// Applies a relabeling of pairs: pair `k` of the result is pair
    /// `perm[k]` of `self`. Pairing and roles are preserved.
    pub fn permute_pairs(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n;
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidSize("pair permutation is not a permutation of 0..n".into()));
        }
        let mut coords = Vec::with_capacity(self.len());
        coords.push(self.coords[0]);
        coords.extend(perm.iter().map(|&p| self.coords[1 + p]));
        coords.extend(perm.iter().map(|&p| self.coords[1 + n + p]));
        Self::from_coords(coords, self.distribution, self.seed)
    }
}

fn roles_for(n: usize) -> Vec<NodeRole> {
    std::iter::once(NodeRole::Depot)
        .chain(std::iter::repeat_n(NodeRole::Pickup, n))
        .chain(std::iter::repeat_n(NodeRole::Delivery, n))
        .collect()
}

fn euclid(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn check_size(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidSize("n must be at least 1".into()));
    }
    Ok(())
}

/// `2n + 1` points drawn i.i.d. from the unit square.
pub fn gen_uniform(n: usize, seed: u64) -> Result<PdpInstance> {
    check_size(n)?;
    let mut rng = rng::stream(seed, &[]);
    let coords = (0..2 * n + 1)
        .map(|_| [rng.gen::<f64>(), rng.gen::<f64>()])
        .collect();
    PdpInstance::from_coords(coords, Distribution::Uniform, seed)
}

/// Pickups around (0.25, 0.25), deliveries around (0.75, 0.75), both with
/// per-axis standard deviation 0.1 and clamped to the unit square. The depot
/// is uniform over the unit square.
pub fn gen_clustered(n: usize, seed: u64) -> Result<PdpInstance> {
    check_size(n)?;
    let mut rng = rng::stream(seed, &[]);
    let unit = Normal::new(0.0, CLUSTER_STD).expect("valid normal parameters");
    let around = |center: [f64; 2], rng: &mut rand_chacha::ChaCha8Rng| {
        [
            (center[0] + unit.sample(rng)).clamp(0.0, 1.0),
            (center[1] + unit.sample(rng)).clamp(0.0, 1.0),
        ]
    };
    let mut coords = Vec::with_capacity(2 * n + 1);
    coords.push([rng.gen::<f64>(), rng.gen::<f64>()]);
    for _ in 0..n {
        coords.push(around(PICKUP_CENTER, &mut rng));
    }
    for _ in 0..n {
        coords.push(around(DELIVERY_CENTER, &mut rng));
    }
    PdpInstance::from_coords(coords, Distribution::Clustered, seed)
}

/// Row-major symmetric Euclidean distance table.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    size: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.size + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.size..(i + 1) * self.size]
    }
}

pub fn distance_matrix(inst: &PdpInstance) -> DistanceMatrix {
    let size = inst.len();
    let mut data = vec![0.0; size * size];
    for i in 0..size {
        for j in i + 1..size {
            let d = inst.distance(i, j);
            data[i * size + j] = d;
            data[j * size + i] = d;
        }
    }
    DistanceMatrix { size, data }
}

// ---------------------------------------------------------------------------
// Files

/// Decimal text for `x` carrying 17 significant digits.
fn decimal_repr(x: f64) -> String {
    if x == 0.0 {
        return "0.0".to_string();
    }
    let exponent = x.abs().log10().floor() as i32;
    let precision = (16 - exponent).max(1) as usize;
    format!("{x:.precision$}")
}

#[derive(Serialize)]
struct InstanceOut {
    version: u32,
    n: usize,
    distribution: Distribution,
    seed: u64,
    coords: Vec<[Box<RawValue>; 2]>,
    roles: Vec<u8>,
}

#[derive(Deserialize)]
struct InstanceIn {
    version: u32,
    n: usize,
    distribution: Distribution,
    seed: u64,
    coords: Vec<[f64; 2]>,
    roles: Vec<u8>,
}

impl PdpInstance {
    fn to_out(&self) -> InstanceOut {
        let raw = |x: f64| RawValue::from_string(decimal_repr(x)).expect("decimal is valid JSON");
        InstanceOut {
            version: INSTANCE_FILE_VERSION,
            n: self.n,
            distribution: self.distribution,
            seed: self.seed,
            coords: self.coords.iter().map(|c| [raw(c[0]), raw(c[1])]).collect(),
            roles: self.roles.iter().map(|r| r.code()).collect(),
        }
    }

    fn from_in(raw: InstanceIn) -> Result<Self> {
        if raw.version != INSTANCE_FILE_VERSION {
            return Err(Error::Config(format!("unsupported instance file version {}", raw.version)));
        }
        let inst = Self::from_coords(raw.coords, raw.distribution, raw.seed)?;
        if inst.n != raw.n {
            return Err(Error::InvalidSize(format!(
                "declared n = {} but {} coordinates given",
                raw.n,
                inst.len()
            )));
        }
        let codes: Vec<u8> = inst.roles.iter().map(|r| r.code()).collect();
        if codes != raw.roles {
            return Err(Error::InvalidSize("roles do not follow the depot/pickup/delivery index layout".into()));
        }
        Ok(inst)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_out()).expect("instance serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_in(serde_json::from_str(text)?)
    }
}

pub fn write_dataset(path: impl AsRef<Path>, instances: &[PdpInstance]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let items: Vec<InstanceOut> = instances.iter().map(|i| i.to_out()).collect();
    serde_json::to_writer(&mut w, &items)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<PdpInstance>> {
    let raw: Vec<InstanceIn> = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    raw.into_iter().map(PdpInstance::from_in).collect()
}

pub fn dataset_to_json(instances: &[PdpInstance]) -> String {
    let items: Vec<InstanceOut> = instances.iter().map(|i| i.to_out()).collect();
    serde_json::to_string(&items).expect("dataset serializes")
}

pub fn dataset_from_json(text: &str) -> Result<Vec<PdpInstance>> {
    let raw: Vec<InstanceIn> = serde_json::from_str(text)?;
    raw.into_iter().map(PdpInstance::from_in).collect()
}

/// `count` instances whose seeds are derived from `(seed, index)` in the
/// given seed domain, so any subset can be regenerated independently.
pub fn generate_set(n: usize, distribution: Distribution, count: usize, seed: u64, domain: u64) -> Result<Vec<PdpInstance>> {
    (0..count)
        .map(|i| PdpInstance::generate(n, distribution, rng::derive_seed(seed, &[domain, i as u64])))
        .collect()
}
