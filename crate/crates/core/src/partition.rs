//! Synthetic non-i.i.d. client data and partition schemes.
//!
//! Three ways to produce clients: a synthetic task family with optional
//! covariate shift (per-client feature rotation) or concept shift
//! (per-group label permutation); the shards partition (label-sorted data
//! cut into shards, a fixed number dealt to each client); and the
//! Dirichlet partition (per-class client proportions drawn from Dir(α)).
//! All of them are pure functions of their inputs and a seed.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from};

/// Concentration used by the Dirichlet partition when none is given.
pub const DEFAULT_DIRICHLET_ALPHA: f64 = 0.3;
/// Personalization fraction used when a split is needed but not configured.
pub const DEFAULT_PERS_FRACTION: f64 = 0.5;

const TAG_SPLIT: u64 = 0x53504c49; // per-client split streams
const TAG_CLIENT: u64 = 0x434c4954;
const TAG_ANGLE: u64 = 0x414e474c;
const TAG_PERM: u64 = 0x5045524d;

// ── Datasets ─────────────────────────────────────────────────────────

/// Labeled examples: equal-width feature vectors with class indices.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<usize>,
    pub n_classes: usize,
}

impl LabeledDataset {
    pub fn new(xs: Vec<Vec<f64>>, ys: Vec<usize>, n_classes: usize) -> Result<Self> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(Error::Data(format!(
                "dataset needs matching nonempty features/labels, got {}/{}",
                xs.len(),
                ys.len()
            )));
        }
        let d = xs[0].len();
        if xs.iter().any(|x| x.len() != d) {
            return Err(Error::Data("feature vectors have mixed widths".into()));
        }
        if let Some(&y) = ys.iter().find(|&&y| y >= n_classes) {
            return Err(Error::Data(format!(
                "label {} out of range for {} classes",
                y, n_classes
            )));
        }
        Ok(LabeledDataset { xs, ys, n_classes })
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.xs[0].len()
    }

    /// Feature rows at `indices`, as a `[n × d]` tensor.
    pub fn features(&self, indices: &[usize]) -> Tensor {
        let d = self.feature_dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&self.xs[i]);
        }
        Tensor::new(vec![indices.len(), d], data).expect("sized above")
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.ys[i]).collect()
    }

    fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            xs: indices.iter().map(|&i| self.xs[i].clone()).collect(),
            ys: indices.iter().map(|&i| self.ys[i]).collect(),
            n_classes: self.n_classes,
        }
    }
}

/// One client's data plus its personalization/evaluation index split.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientDataset {
    pub id: usize,
    pub data: LabeledDataset,
    pub pers: Vec<usize>,
    pub eval: Vec<usize>,
}

/// Task-family shift applied across clients.
#[derive(Clone, Debug, PartialEq)]
pub enum ShiftSpec {
    None,
    /// Covariate shift: each client's features rotated by an angle drawn
    /// uniformly from `[0, range_deg)` in the first two coordinates.
    Rotation { range_deg: f64 },
    /// Concept shift: clients fall into `groups` groups, each applying a
    /// distinct permutation to the class labels.
    Concept { groups: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskFamilyConfig {
    pub n_clients: usize,
    pub n_classes: usize,
    pub samples_per_client: usize,
    pub feature_dim: usize,
    /// Standard deviation of the Gaussian class clusters.
    pub noise: f64,
    pub shift: ShiftSpec,
    pub seed: u64,
}

impl TaskFamilyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 || self.samples_per_client < 2 {
            return Err(Error::Config(
                "task family needs at least one client and two samples per client".into(),
            ));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("n_classes must be at least 2".into()));
        }
        if self.feature_dim < 2 {
            return Err(Error::Config("feature_dim must be at least 2".into()));
        }
        if self.n_classes > 2 * self.feature_dim {
            return Err(Error::Config(format!(
                "cannot place {} class means in {} dimensions (max {})",
                self.n_classes,
                self.feature_dim,
                2 * self.feature_dim
            )));
        }
        if !(self.noise > 0.0) {
            return Err(Error::Config("noise must be positive".into()));
        }
        match self.shift {
            ShiftSpec::Rotation { range_deg } => {
                if !(0.0..360.0).contains(&range_deg) {
                    return Err(Error::Config(format!(
                        "rotation range {} outside [0, 360)",
                        range_deg
                    )));
                }
            }
            ShiftSpec::Concept { groups } => {
                if groups < 2 {
                    return Err(Error::Config("concept shift needs at least 2 groups".into()));
                }
            }
            ShiftSpec::None => {}
        }
        Ok(())
    }
}

// ── Synthetic task families ──────────────────────────────────────────

/// Class-cluster means: `radius · ±e_c`, axis-aligned and well separated.
pub fn class_means(n_classes: usize, dim: usize, radius: f64) -> Vec<Vec<f64>> {
    (0..n_classes)
        .map(|c| {
            let mut m = vec![0.0; dim];
            let axis = c % dim;
            m[axis] = if c < dim { radius } else { -radius };
            m
        })
        .collect()
}

/// Rotate the first two coordinates in place.
pub fn rotate_in_plane(x: &mut [f64], angle_rad: f64) {
    let (s, c) = angle_rad.sin_cos();
    let (x0, x1) = (x[0], x[1]);
    x[0] = c * x0 - s * x1;
    x[1] = s * x0 + c * x1;
}

/// Remap every label through `perm` (must be a permutation of 0..n_classes).
pub fn apply_label_permutation(ds: &mut LabeledDataset, perm: &[usize]) -> Result<()> {
    let n = ds.n_classes;
    let mut seen = vec![false; n];
    if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::Data(format!("not a permutation of 0..{}: {:?}", n, perm)));
    }
    for y in &mut ds.ys {
        *y = perm[*y];
    }
    Ok(())
}

/// Per-client rotation angles (degrees) for a rotation-shift family.
pub fn rotation_angles(cfg: &TaskFamilyConfig) -> Vec<f64> {
    let range = match cfg.shift {
        ShiftSpec::Rotation { range_deg } => range_deg,
        _ => 0.0,
    };
    let mut rng = rng_from(derive_seed(cfg.seed, TAG_ANGLE));
    (0..cfg.n_clients).map(|_| rng.random_range(0.0..range.max(f64::MIN_POSITIVE))).collect()
}

/// The label permutation applied by each concept-shift group.
///
/// Group `g` maps cluster `c` to `base[(c + g) mod N]` for one seeded base
/// permutation, so any two groups disagree on every single class. Falls
/// back to seeded distinct permutations when there are more groups than
/// classes.
pub fn concept_permutations(n_classes: usize, groups: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = rng_from(derive_seed(seed, TAG_PERM));
    let mut base: Vec<usize> = (0..n_classes).collect();
    base.shuffle(&mut rng);
    if groups <= n_classes {
        (0..groups)
            .map(|g| (0..n_classes).map(|c| base[(c + g) % n_classes]).collect())
            .collect()
    } else {
        let mut perms: Vec<Vec<usize>> = Vec::with_capacity(groups);
        while perms.len() < groups {
            let mut p: Vec<usize> = (0..n_classes).collect();
            p.shuffle(&mut rng);
            if !perms.contains(&p) {
                perms.push(p);
            }
        }
        perms
    }
}

/// Generate a family of clients from seeded Gaussian class clusters.
///
/// Labels are balanced per client (round-robin over classes). With concept
/// shift, client `i` belongs to group `i mod G` and its labels pass through
/// that group's permutation; the underlying feature clusters are shared.
pub fn make_task_family(cfg: &TaskFamilyConfig) -> Result<Vec<ClientDataset>> {
    cfg.validate()?;
    let means = class_means(cfg.n_classes, cfg.feature_dim, 2.0);
    let angles = rotation_angles(cfg);
    let perms = match cfg.shift {
        ShiftSpec::Concept { groups } => concept_permutations(cfg.n_classes, groups, cfg.seed),
        _ => Vec::new(),
    };

    let mut clients = Vec::with_capacity(cfg.n_clients);
    for i in 0..cfg.n_clients {
        let mut rng = rng_from(derive_seed(cfg.seed, TAG_CLIENT + i as u64));
        let normal = Normal::new(0.0, cfg.noise).expect("positive noise");
        let mut xs = Vec::with_capacity(cfg.samples_per_client);
        let mut ys = Vec::with_capacity(cfg.samples_per_client);
        for k in 0..cfg.samples_per_client {
            let cluster = k % cfg.n_classes;
            let mut x: Vec<f64> = means[cluster]
                .iter()
                .map(|&m| m + normal.sample(&mut rng))
                .collect();
            match cfg.shift {
                ShiftSpec::Rotation { .. } => {
                    rotate_in_plane(&mut x, angles[i].to_radians());
                }
                _ => {}
            }
            let y = match cfg.shift {
                ShiftSpec::Concept { groups } => perms[i % groups][cluster],
                _ => cluster,
            };
            xs.push(x);
            ys.push(y);
        }
        let data = LabeledDataset::new(xs, ys, cfg.n_classes)?;
        let cd = ClientDataset { id: i, data, pers: Vec::new(), eval: Vec::new() };
        clients.push(split_pers_eval(
            cd,
            DEFAULT_PERS_FRACTION,
            derive_seed(cfg.seed, TAG_SPLIT + i as u64),
        )?);
    }
    Ok(clients)
}

/// Pooled i.i.d. synthetic dataset (for the shards/Dirichlet partitioners).
pub fn synthetic_pool(
    n_examples: usize,
    n_classes: usize,
    feature_dim: usize,
    noise: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if n_examples == 0 {
        return Err(Error::Config("pool needs at least one example".into()));
    }
    let means = class_means(n_classes, feature_dim, 2.0);
    let mut rng = rng_from(seed);
    let normal = Normal::new(0.0, noise)
        .map_err(|_| Error::Config("noise must be positive".into()))?;
    let mut xs = Vec::with_capacity(n_examples);
    let mut ys = Vec::with_capacity(n_examples);
    for k in 0..n_examples {
        let c = k % n_classes;
        xs.push(means[c].iter().map(|&m| m + normal.sample(&mut rng)).collect());
        ys.push(c);
    }
    // shuffle so the pool is not label-ordered
    let mut order: Vec<usize> = (0..n_examples).collect();
    order.shuffle(&mut rng);
    let ds = LabeledDataset::new(xs, ys, n_classes)?;
    Ok(ds.subset(&order))
}

// ── Partition schemes ────────────────────────────────────────────────

fn finish_client(id: usize, data: LabeledDataset, seed: u64) -> Result<ClientDataset> {
    let cd = ClientDataset { id, data, pers: Vec::new(), eval: Vec::new() };
    if cd.data.len() < 2 {
        // degenerate one-example client: everything goes to pers
        let mut cd = cd;
        cd.pers = vec![0];
        cd.eval = Vec::new();
        return Ok(cd);
    }
    split_pers_eval(cd, DEFAULT_PERS_FRACTION, seed)
}

/// Label-sorted shards dealt to clients, `shards_per_client` each.
pub fn shards_partition(
    ds: &LabeledDataset,
    n_clients: usize,
    shards_per_client: usize,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    if n_clients == 0 || shards_per_client == 0 {
        return Err(Error::Config("n_clients and shards_per_client must be positive".into()));
    }
    let n_shards = n_clients * shards_per_client;
    if ds.len() % n_shards != 0 {
        return Err(Error::Config(format!(
            "dataset size {} not divisible into {} shards ({} clients × {} shards); \
             each shard would need {} examples",
            ds.len(),
            n_shards,
            n_clients,
            shards_per_client,
            ds.len() as f64 / n_shards as f64
        )));
    }
    let shard_size = ds.len() / n_shards;

    let mut by_label: Vec<usize> = (0..ds.len()).collect();
    by_label.sort_by_key(|&i| (ds.ys[i], i));

    let mut shard_order: Vec<usize> = (0..n_shards).collect();
    shard_order.shuffle(&mut rng_from(seed));

    let mut clients = Vec::with_capacity(n_clients);
    for c in 0..n_clients {
        let mut idx = Vec::with_capacity(shards_per_client * shard_size);
        for s in 0..shards_per_client {
            let shard = shard_order[c * shards_per_client + s];
            idx.extend_from_slice(&by_label[shard * shard_size..(shard + 1) * shard_size]);
        }
        idx.sort_unstable();
        clients.push(finish_client(c, ds.subset(&idx), derive_seed(seed, TAG_SPLIT + c as u64))?);
    }
    Ok(clients)
}

/// Per-class proportions drawn from a symmetric Dirichlet(α) over clients.
///
/// Allocation uses largest-remainder rounding. A client that ends up with
/// zero examples receives one example moved from the currently largest
/// client.
pub fn dirichlet_partition(
    ds: &LabeledDataset,
    n_clients: usize,
    concentration: f64,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    if n_clients == 0 {
        return Err(Error::Config("n_clients must be positive".into()));
    }
    if !(concentration > 0.0) {
        return Err(Error::Config(format!("concentration must be > 0, got {}", concentration)));
    }
    if ds.len() < n_clients {
        return Err(Error::Data(format!(
            "cannot give {} clients at least one example from {}",
            n_clients,
            ds.len()
        )));
    }

    let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
    for class in 0..ds.n_classes {
        let members: Vec<usize> = (0..ds.len()).filter(|&i| ds.ys[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        let mut rng = rng_from(derive_seed(seed, class as u64));
        let props = dirichlet_draw(&mut rng, concentration, n_clients);
        let counts = largest_remainder(&props, members.len());
        let mut cursor = 0;
        for (client, &count) in counts.iter().enumerate() {
            assignment[client].extend_from_slice(&members[cursor..cursor + count]);
            cursor += count;
        }
    }

    // repair empty clients by moving one example from the largest client
    loop {
        let empty = match assignment.iter().position(|a| a.is_empty()) {
            Some(i) => i,
            None => break,
        };
        let largest = (0..n_clients)
            .max_by_key(|&i| (assignment[i].len(), usize::MAX - i))
            .expect("nonempty");
        let moved = assignment[largest].pop().expect("largest client nonempty");
        assignment[empty].push(moved);
    }

    let mut clients = Vec::with_capacity(n_clients);
    for (c, mut idx) in assignment.into_iter().enumerate() {
        idx.sort_unstable();
        clients.push(finish_client(c, ds.subset(&idx), derive_seed(seed, TAG_SPLIT + c as u64))?);
    }
    Ok(clients)
}

fn dirichlet_draw(rng: &mut impl Rng, alpha: f64, n: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    let mut draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total <= 0.0 {
        // all-zero underflow at tiny alpha: fall back to a single winner
        let winner = rng.random_range(0..n);
        draws = vec![0.0; n];
        draws[winner] = 1.0;
        return draws;
    }
    draws.iter().map(|d| d / total).collect()
}

fn largest_remainder(props: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = props.iter().map(|p| (p * total as f64).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut rema: Vec<(usize, f64)> = props
        .iter()
        .enumerate()
        .map(|(i, p)| (i, p * total as f64 - counts[i] as f64))
        .collect();
    rema.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for k in 0..total - assigned {
        counts[rema[k % rema.len()].0] += 1;
    }
    counts
}

/// Seeded disjoint pers/eval split: first `ceil(fraction·n)` shuffled
/// indices personalize, the rest evaluate.
pub fn split_pers_eval(cd: ClientDataset, fraction: f64, seed: u64) -> Result<ClientDataset> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction {} outside (0, 1)", fraction)));
    }
    let n = cd.data.len();
    if n < 2 {
        return Err(Error::Data(format!("cannot split {} example(s) into pers/eval", n)));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(seed));
    let cut = (fraction * n as f64).ceil() as usize;
    let cut = cut.min(n - 1); // both sides stay nonempty
    let mut pers = order[..cut].to_vec();
    let mut eval = order[cut..].to_vec();
    pers.sort_unstable();
    eval.sort_unstable();
    Ok(ClientDataset { pers, eval, ..cd })
}

// ── IDX loader ───────────────────────────────────────────────────────

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize, path: &std::path::Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{}: truncated header", path.display())))
}

/// Load a big-endian IDX image/label file pair; pixels are scaled to [0,1]
/// and each image flattened to one feature vector.
pub fn idx_load(
    images_path: impl AsRef<std::path::Path>,
    labels_path: impl AsRef<std::path::Path>,
) -> Result<LabeledDataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let img = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lab = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;

    let magic = read_u32(&img, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: expected image magic 0x{:08x}, found 0x{:08x}",
            images_path.display(),
            IDX_IMAGES_MAGIC,
            magic
        )));
    }
    let count = read_u32(&img, 4, images_path)? as usize;
    let rows = read_u32(&img, 8, images_path)? as usize;
    let cols = read_u32(&img, 12, images_path)? as usize;
    let pixels = rows * cols;
    if img.len() != 16 + count * pixels {
        return Err(Error::Format(format!(
            "{}: expected {} pixel bytes for {} images of {}x{}, found {}",
            images_path.display(),
            count * pixels,
            count,
            rows,
            cols,
            img.len() - 16
        )));
    }

    let lmagic = read_u32(&lab, 0, labels_path)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: expected label magic 0x{:08x}, found 0x{:08x}",
            labels_path.display(),
            IDX_LABELS_MAGIC,
            lmagic
        )));
    }
    let lcount = read_u32(&lab, 4, labels_path)? as usize;
    if lcount != count {
        return Err(Error::Format(format!(
            "image/label counts disagree: {} images vs {} labels",
            count, lcount
        )));
    }
    if lab.len() != 8 + lcount {
        return Err(Error::Format(format!(
            "{}: expected {} label bytes, found {}",
            labels_path.display(),
            lcount,
            lab.len() - 8
        )));
    }

    let xs: Vec<Vec<f64>> = (0..count)
        .map(|i| {
            img[16 + i * pixels..16 + (i + 1) * pixels]
                .iter()
                .map(|&b| b as f64 / 255.0)
                .collect()
        })
        .collect();
    let ys: Vec<usize> = lab[8..].iter().map(|&b| b as usize).collect();
    let n_classes = ys.iter().max().map_or(0, |&m| m + 1);
    LabeledDataset::new(xs, ys, n_classes)
}

// ── Statistics ───────────────────────────────────────────────────────

/// Per-client class counts as CSV (`client_id,class,count`).
pub fn partition_stats_csv(clients: &[ClientDataset]) -> String {
    let mut out = String::from("client_id,class,count\n");
    for cd in clients {
        let mut counts = vec![0usize; cd.data.n_classes];
        for &y in &cd.data.ys {
            counts[y] += 1;
        }
        for (class, &count) in counts.iter().enumerate() {
            if count > 0 {
                out.push_str(&format!("{},{},{}\n", cd.id, class, count));
            }
        }
    }
    out
}

/// Total-variation distance of each client's label distribution from the
/// pooled one, averaged over clients. The heterogeneity measure used by the
/// partition tests.
pub fn mean_label_tv(clients: &[ClientDataset]) -> f64 {
    let n_classes = clients[0].data.n_classes;
    let mut global = vec![0.0; n_classes];
    let mut total = 0.0;
    for cd in clients {
        for &y in &cd.data.ys {
            global[y] += 1.0;
        }
        total += cd.data.len() as f64;
    }
    for g in &mut global {
        *g /= total;
    }
    let mut acc = 0.0;
    for cd in clients {
        let mut local = vec![0.0; n_classes];
        for &y in &cd.data.ys {
            local[y] += 1.0 / cd.data.len() as f64;
        }
        let tv: f64 = local.iter().zip(&global).map(|(l, g)| (l - g).abs()).sum::<f64>() / 2.0;
        acc += tv;
    }
    acc / clients.len() as f64
}
