//! Artifact persistence: JSON manifests next to flat little-endian f64
//! arrays, row-major, with content hashes for integrity and caching.
//! Round-trips are bit-exact.

use crate::grid::TimeGrid;
use crate::reduction::{KlBasis, PcaBasis, QSamples};
use crate::scm::{DerivativeOrder, InitialState, Trajectory, TrainingDataset};
use crate::{PlomError, Result};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<TimeGrid>,
    #[serde(default)]
    pub dims: BTreeMap<String, usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub provenance: serde_json::Value,
    #[serde(default)]
    pub arrays: Vec<ArrayEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inputs_hash: Option<String>,
}

impl Manifest {
    pub fn new(kind: &str) -> Self {
        Manifest {
            format_version: FORMAT_VERSION,
            kind: kind.to_string(),
            model_id: None,
            grid: None,
            dims: BTreeMap::new(),
            seed: None,
            provenance: serde_json::Value::Null,
            arrays: Vec::new(),
            inputs_hash: None,
        }
    }

    pub fn array(&self, name: &str) -> Result<&ArrayEntry> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| PlomError::Manifest(format!("array `{name}` missing from manifest")))
    }

    pub fn dim(&self, name: &str) -> Result<usize> {
        self.dims
            .get(name)
            .copied()
            .ok_or_else(|| PlomError::Manifest(format!("dimension `{name}` missing")))
    }

    /// Content hash of the serialized manifest, used as an input hash by
    /// downstream stages.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("manifest serializes");
        let mut h = Sha256::new();
        h.update(&bytes);
        format!("{:x}", h.finalize())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

/// Write one flat array file and return its manifest entry.
pub fn write_array(dir: &Path, name: &str, shape: &[usize], data: &[f64]) -> Result<ArrayEntry> {
    let count: usize = shape.iter().product();
    if count != data.len() {
        return Err(PlomError::Shape(format!(
            "array `{name}`: shape {:?} holds {count} entries, got {}",
            shape,
            data.len()
        )));
    }
    let file = format!("{name}.f64");
    let path = dir.join(&file);
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let sha = sha256_hex(&bytes);
    fs::File::create(&path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| PlomError::io(path.display().to_string(), e))?;
    Ok(ArrayEntry {
        name: name.to_string(),
        file,
        shape: shape.to_vec(),
        sha256: sha,
    })
}

/// Read an array file back, verifying length and content hash.
pub fn read_array(dir: &Path, entry: &ArrayEntry) -> Result<Vec<f64>> {
    let path = dir.join(&entry.file);
    let mut bytes = Vec::new();
    fs::File::open(&path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| PlomError::io(path.display().to_string(), e))?;
    if sha256_hex(&bytes) != entry.sha256 {
        return Err(PlomError::Integrity(format!(
            "array `{}` content hash mismatch",
            entry.name
        )));
    }
    let count: usize = entry.shape.iter().product();
    if bytes.len() != count * 8 {
        return Err(PlomError::Integrity(format!(
            "array `{}` has {} bytes, expected {}",
            entry.name,
            bytes.len(),
            count * 8
        )));
    }
    let mut out = Vec::with_capacity(count);
    for chunk in bytes.chunks_exact(8) {
        out.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    Ok(out)
}

pub fn read_matrix(dir: &Path, entry: &ArrayEntry) -> Result<Array2<f64>> {
    if entry.shape.len() != 2 {
        return Err(PlomError::Manifest(format!(
            "array `{}` is not a matrix",
            entry.name
        )));
    }
    let data = read_array(dir, entry)?;
    Array2::from_shape_vec((entry.shape[0], entry.shape[1]), data)
        .map_err(|e| PlomError::Shape(e.to_string()))
}

pub fn save_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| PlomError::Manifest(e.to_string()))?;
    fs::write(&path, text.as_bytes()).map_err(|e| PlomError::io(path.display().to_string(), e))
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text =
        fs::read_to_string(&path).map_err(|e| PlomError::io(path.display().to_string(), e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| PlomError::Integrity(format!("manifest unreadable: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(PlomError::Integrity(format!(
            "manifest format version {} unsupported",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| PlomError::io(dir.display().to_string(), e))
}

/// Write a CSV file with a header row; floats use the shortest
/// round-trip representation so reruns are byte-identical.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut text = String::new();
    text.push_str(&header.join(","));
    text.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    fs::write(path, text.as_bytes()).map_err(|e| PlomError::io(path.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// dataset persistence
// ---------------------------------------------------------------------------

/// Persist a training dataset: manifest + one stacked trajectory array per
/// derivative order + the control matrix.
pub fn save_dataset(
    dir: &Path,
    dataset: &TrainingDataset,
    model_id: &str,
    inputs_hash: Option<String>,
) -> Result<Manifest> {
    ensure_dir(dir)?;
    let n_d = dataset.n_d();
    let n = dataset.state_dim();
    let n_time = dataset.pairs[0].0.n_time();
    let order = dataset.pairs[0].0.order;

    let mut manifest = Manifest::new("dataset");
    manifest.model_id = Some(model_id.to_string());
    manifest.grid = Some(dataset.grid.clone());
    manifest.seed = Some(dataset.seed);
    manifest.dims.insert("n_d".into(), n_d);
    manifest.dims.insert("state_dim".into(), n);
    manifest.dims.insert("n_time".into(), n_time);
    manifest.dims.insert("m_d".into(), order.m_d());
    manifest.inputs_hash = inputs_hash;

    let mut stack = Vec::with_capacity(n_d * n * n_time);
    for (traj, _) in &dataset.pairs {
        stack.extend(traj.values.iter().copied());
    }
    manifest
        .arrays
        .push(write_array(dir, "trajectories", &[n_d, n, n_time], &stack)?);
    if order == DerivativeOrder::Second {
        for (name, pick) in [
            ("dtrajectories", 0usize),
            ("ddtrajectories", 1usize),
        ] {
            let mut stack = Vec::with_capacity(n_d * n * n_time);
            for (traj, _) in &dataset.pairs {
                let arr = if pick == 0 {
                    traj.dvalues.as_ref()
                } else {
                    traj.ddvalues.as_ref()
                };
                let arr = arr.ok_or_else(|| {
                    PlomError::Shape("second-order dataset missing derivative stacks".into())
                })?;
                stack.extend(arr.iter().copied());
            }
            manifest
                .arrays
                .push(write_array(dir, name, &[n_d, n, n_time], &stack)?);
        }
    }
    let controls = dataset.controls();
    let n_w = controls.nrows();
    manifest.arrays.push(write_array(
        dir,
        "controls",
        &[n_w, n_d],
        controls.as_slice().unwrap(),
    )?);
    manifest.dims.insert("n_w".into(), n_w);
    save_manifest(dir, &manifest)?;
    Ok(manifest)
}

/// Load a dataset previously written by [`save_dataset`]. The deterministic
/// initial state is reconstructed by the caller's model.
pub fn load_dataset(dir: &Path, initial: InitialState) -> Result<TrainingDataset> {
    let manifest = load_manifest(dir)?;
    if manifest.kind != "dataset" {
        return Err(PlomError::Manifest(format!(
            "expected a dataset manifest, found `{}`",
            manifest.kind
        )));
    }
    let grid = manifest
        .grid
        .clone()
        .ok_or_else(|| PlomError::Manifest("dataset manifest lacks a grid".into()))?;
    let n_d = manifest.dim("n_d")?;
    let n = manifest.dim("state_dim")?;
    let n_time = manifest.dim("n_time")?;
    let order = match manifest.dim("m_d")? {
        1 => DerivativeOrder::First,
        2 => DerivativeOrder::Second,
        other => {
            return Err(PlomError::Manifest(format!("unsupported derivative order {other}")))
        }
    };
    let traj_data = read_array(dir, manifest.array("trajectories")?)?;
    let dtraj = if order == DerivativeOrder::Second {
        Some(read_array(dir, manifest.array("dtrajectories")?)?)
    } else {
        None
    };
    let ddtraj = if order == DerivativeOrder::Second {
        Some(read_array(dir, manifest.array("ddtrajectories")?)?)
    } else {
        None
    };
    let controls = read_matrix(dir, manifest.array("controls")?)?;

    let per = n * n_time;
    let mut pairs = Vec::with_capacity(n_d);
    for l in 0..n_d {
        let values =
            Array2::from_shape_vec((n, n_time), traj_data[l * per..(l + 1) * per].to_vec())
                .map_err(|e| PlomError::Shape(e.to_string()))?;
        let dvalues = dtraj
            .as_ref()
            .map(|d| {
                Array2::from_shape_vec((n, n_time), d[l * per..(l + 1) * per].to_vec())
                    .map_err(|e| PlomError::Shape(e.to_string()))
            })
            .transpose()?;
        let ddvalues = ddtraj
            .as_ref()
            .map(|d| {
                Array2::from_shape_vec((n, n_time), d[l * per..(l + 1) * per].to_vec())
                    .map_err(|e| PlomError::Shape(e.to_string()))
            })
            .transpose()?;
        pairs.push((
            Trajectory {
                values,
                dvalues,
                ddvalues,
                order,
                initial: initial.clone(),
            },
            controls.column(l).to_owned(),
        ));
    }
    Ok(TrainingDataset {
        grid,
        pairs,
        seed: manifest.seed.unwrap_or_default(),
    })
}

// ---------------------------------------------------------------------------
// basis persistence
// ---------------------------------------------------------------------------

/// Persist a KL basis: mean, time-blocked modes streamed into one file,
/// eigenvalues, and the energy curve. Derivative stacks are rebuilt on load.
pub fn save_kl_basis(dir: &Path, kl: &KlBasis, inputs_hash: Option<String>) -> Result<Manifest> {
    ensure_dir(dir)?;
    let (n, n_time, n_q) = (kl.state_dim(), kl.n_time(), kl.n_q());
    let mut manifest = Manifest::new("kl_basis");
    manifest.grid = Some(kl.grid.clone());
    manifest.dims.insert("state_dim".into(), n);
    manifest.dims.insert("n_time".into(), n_time);
    manifest.dims.insert("n_q".into(), n_q);
    manifest.dims.insert("m_d".into(), kl.order.m_d());
    manifest.inputs_hash = inputs_hash;
    manifest.provenance = serde_json::json!({
        "err_kl": kl.err_kl,
        "eps_unreachable": kl.eps_unreachable,
        "total_energy": kl.total_energy,
    });

    manifest.arrays.push(write_array(
        dir,
        "mean",
        &[n, n_time],
        kl.mean.as_slice().unwrap(),
    )?);
    let mut modes = Vec::with_capacity(n_time * n * n_q);
    for block in &kl.modes {
        modes.extend(block.iter().copied());
    }
    manifest
        .arrays
        .push(write_array(dir, "modes", &[n_time, n, n_q], &modes)?);
    manifest.arrays.push(write_array(
        dir,
        "eigenvalues",
        &[n_q],
        kl.eigenvalues.as_slice().unwrap(),
    )?);
    manifest.arrays.push(write_array(
        dir,
        "spectrum",
        &[kl.spectrum.len()],
        kl.spectrum.as_slice().unwrap(),
    )?);
    manifest.arrays.push(write_array(
        dir,
        "initial_y0",
        &[kl.initial.y0.len()],
        kl.initial.y0.as_slice().unwrap(),
    )?);
    save_manifest(dir, &manifest)?;

    // energy curve for plots
    let rows: Vec<Vec<f64>> = kl
        .err_curve()
        .iter()
        .enumerate()
        .map(|(k, e)| vec![(k + 1) as f64, kl.spectrum[k], *e])
        .collect();
    write_csv(&dir.join("energy_curve.csv"), &["order", "eigenvalue", "err_kl"], &rows)?;
    Ok(manifest)
}

pub fn load_kl_basis(dir: &Path, initial_hint: Option<InitialState>) -> Result<KlBasis> {
    let manifest = load_manifest(dir)?;
    if manifest.kind != "kl_basis" {
        return Err(PlomError::Manifest(format!(
            "expected a kl_basis manifest, found `{}`",
            manifest.kind
        )));
    }
    let grid = manifest
        .grid
        .clone()
        .ok_or_else(|| PlomError::Manifest("kl manifest lacks a grid".into()))?;
    let n = manifest.dim("state_dim")?;
    let n_time = manifest.dim("n_time")?;
    let n_q = manifest.dim("n_q")?;
    let order = match manifest.dim("m_d")? {
        1 => DerivativeOrder::First,
        2 => DerivativeOrder::Second,
        other => {
            return Err(PlomError::Manifest(format!("unsupported derivative order {other}")))
        }
    };
    let mean_data = read_array(dir, manifest.array("mean")?)?;
    let mean = Array2::from_shape_vec((n, n_time), mean_data)
        .map_err(|e| PlomError::Shape(e.to_string()))?;
    let modes_data = read_array(dir, manifest.array("modes")?)?;
    let per = n * n_q;
    let mut modes = Vec::with_capacity(n_time);
    for t in 0..n_time {
        modes.push(
            Array2::from_shape_vec((n, n_q), modes_data[t * per..(t + 1) * per].to_vec())
                .map_err(|e| PlomError::Shape(e.to_string()))?,
        );
    }
    let eigenvalues = Array1::from_vec(read_array(dir, manifest.array("eigenvalues")?)?);
    let spectrum = Array1::from_vec(read_array(dir, manifest.array("spectrum")?)?);
    let y0 = Array1::from_vec(read_array(dir, manifest.array("initial_y0")?)?);
    let initial = initial_hint.unwrap_or(InitialState {
        y0,
        dy0: None,
        ddy0: None,
    });
    let prov = &manifest.provenance;
    Ok(KlBasis {
        mean,
        modes,
        eigenvalues,
        spectrum,
        total_energy: prov["total_energy"].as_f64().unwrap_or(f64::NAN),
        err_kl: prov["err_kl"].as_f64().unwrap_or(f64::NAN),
        eps_unreachable: prov["eps_unreachable"].as_bool().unwrap_or(false),
        grid,
        order,
        initial,
        dmean: None,
        ddmean: None,
        dmodes: None,
        ddmodes: None,
    })
}

pub fn save_pca_basis(
    dir: &Path,
    pca: &PcaBasis,
    q: &QSamples,
    eta: &Array2<f64>,
    inputs_hash: Option<String>,
) -> Result<Manifest> {
    ensure_dir(dir)?;
    let mut manifest = Manifest::new("pca_basis");
    manifest.dims.insert("n_x".into(), pca.n_x());
    manifest.dims.insert("nu".into(), pca.nu());
    manifest.dims.insert("n_q".into(), pca.n_q);
    manifest.dims.insert("n_w".into(), pca.n_w);
    manifest.inputs_hash = inputs_hash;
    manifest.provenance = serde_json::json!({
        "err_pca": pca.err_pca,
        "lower_bound_fallback": pca.lower_bound_fallback,
        "total_energy": pca.total_energy,
    });
    manifest.arrays.push(write_array(
        dir,
        "mean",
        &[pca.n_x()],
        pca.mean.as_slice().unwrap(),
    )?);
    manifest.arrays.push(write_array(
        dir,
        "vectors",
        &[pca.n_x(), pca.nu()],
        pca.vectors.as_slice().unwrap(),
    )?);
    manifest.arrays.push(write_array(
        dir,
        "values",
        &[pca.nu()],
        pca.values.as_slice().unwrap(),
    )?);
    manifest.arrays.push(write_array(
        dir,
        "spectrum",
        &[pca.spectrum.len()],
        pca.spectrum.as_slice().unwrap(),
    )?);
    manifest.arrays.push(write_array(
        dir,
        "q_samples",
        &[q.q.nrows(), q.q.ncols()],
        q.q.as_slice().unwrap(),
    )?);
    manifest.arrays.push(write_array(
        dir,
        "eta_d",
        &[eta.nrows(), eta.ncols()],
        eta.as_slice().unwrap(),
    )?);
    save_manifest(dir, &manifest)?;
    Ok(manifest)
}

pub fn load_pca_basis(dir: &Path) -> Result<(PcaBasis, QSamples, Array2<f64>)> {
    let manifest = load_manifest(dir)?;
    if manifest.kind != "pca_basis" {
        return Err(PlomError::Manifest(format!(
            "expected a pca_basis manifest, found `{}`",
            manifest.kind
        )));
    }
    let mean = Array1::from_vec(read_array(dir, manifest.array("mean")?)?);
    let vectors = read_matrix(dir, manifest.array("vectors")?)?;
    let values = Array1::from_vec(read_array(dir, manifest.array("values")?)?);
    let spectrum = Array1::from_vec(read_array(dir, manifest.array("spectrum")?)?);
    let q = read_matrix(dir, manifest.array("q_samples")?)?;
    let eta = read_matrix(dir, manifest.array("eta_d")?)?;
    let prov = &manifest.provenance;
    Ok((
        PcaBasis {
            mean,
            vectors,
            values,
            spectrum,
            total_energy: prov["total_energy"].as_f64().unwrap_or(f64::NAN),
            err_pca: prov["err_pca"].as_f64().unwrap_or(f64::NAN),
            lower_bound_fallback: prov["lower_bound_fallback"].as_bool().unwrap_or(false),
            n_q: manifest.dim("n_q")?,
            n_w: manifest.dim("n_w")?,
        },
        QSamples { q },
        eta,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::linear::LinearDecay;
    use crate::scm::build_training_dataset;
    use crate::ScmModel;
    use tempfile::TempDir;

    #[test]
    fn array_roundtrip_is_bit_exact() {
        let tmp = TempDir::new().unwrap();
        let data: Vec<f64> = (0..64)
            .map(|i| (i as f64 * 0.7).sin() * 1e-7 + i as f64)
            .collect();
        let entry = write_array(tmp.path(), "probe", &[8, 8], &data).unwrap();
        let back = read_array(tmp.path(), &entry).unwrap();
        assert_eq!(data.len(), back.len());
        for (a, b) in data.iter().zip(back.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn corrupted_array_is_refused() {
        let tmp = TempDir::new().unwrap();
        let data = vec![1.0, 2.0, 3.0];
        let entry = write_array(tmp.path(), "probe", &[3], &data).unwrap();
        // flip a byte
        let path = tmp.path().join(&entry.file);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_array(tmp.path(), &entry),
            Err(PlomError::Integrity(_))
        ));
    }

    #[test]
    fn corrupted_manifest_is_refused() {
        let tmp = TempDir::new().unwrap();
        std::fs::write(tmp.path().join(MANIFEST_FILE), b"{not json").unwrap();
        assert!(matches!(load_manifest(tmp.path()), Err(PlomError::Integrity(_))));
    }

    #[test]
    fn dataset_roundtrip_bitwise() {
        let tmp = TempDir::new().unwrap();
        let model = LinearDecay::default();
        let grid = crate::grid::TimeGrid::new(0.0, 0.1, 12).unwrap();
        let ds = build_training_dataset(&model, 4, &grid, 5).unwrap();
        save_dataset(tmp.path(), &ds, model.id(), None).unwrap();
        let back = load_dataset(tmp.path(), model.initial_state()).unwrap();
        assert_eq!(back.n_d(), 4);
        for ((ta, wa), (tb, wb)) in ds.pairs.iter().zip(back.pairs.iter()) {
            assert_eq!(ta.values, tb.values);
            assert_eq!(wa, wb);
        }
        assert_eq!(ds.seed, back.seed);
    }

    #[test]
    fn kl_and_pca_roundtrip() {
        let tmp = TempDir::new().unwrap();
        let model = LinearDecay::default();
        let grid = crate::grid::TimeGrid::new(0.0, 0.1, 10).unwrap();
        let ds = build_training_dataset(&model, 5, &grid, 3).unwrap();
        let (kl, qs) = crate::reduction::kl_expand(&ds, 1e-8).unwrap();
        let x = crate::reduction::stack_x(&qs, &ds.controls().view()).unwrap();
        let (pca, lat) = crate::reduction::pca_reduce(&x.view(), kl.n_q(), 1e-8).unwrap();

        let kl_dir = tmp.path().join("kl");
        save_kl_basis(&kl_dir, &kl, None).unwrap();
        let kl_back = load_kl_basis(&kl_dir, Some(model.initial_state())).unwrap();
        assert_eq!(kl.mean, kl_back.mean);
        assert_eq!(kl.eigenvalues, kl_back.eigenvalues);
        for (a, b) in kl.modes.iter().zip(kl_back.modes.iter()) {
            assert_eq!(a, b);
        }

        let pca_dir = tmp.path().join("pca");
        save_pca_basis(&pca_dir, &pca, &qs, &lat.eta, None).unwrap();
        let (pca_back, qs_back, eta_back) = load_pca_basis(&pca_dir).unwrap();
        assert_eq!(pca.mean, pca_back.mean);
        assert_eq!(pca.vectors, pca_back.vectors);
        assert_eq!(qs.q, qs_back.q);
        assert_eq!(lat.eta, eta_back);
    }
}
