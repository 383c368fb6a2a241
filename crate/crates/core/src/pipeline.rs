//! End-to-end orchestration: configuration, stage execution with
//! content-hash caching, persistence, and report export.
//!
//! Stage graph: train -> reduce -> learn (unconstrained) -> residual ->
//! learn-constrained -> report. Every stage writes a manifest carrying an
//! `inputs_hash`; a rerun whose inputs hash matches performs no
//! recomputation. A present-but-unreadable manifest is refused.

use crate::constraints::{
    assemble_targets, build_rho_surrogate, lagrange_iterate, Algo, LagrangeOptions, LagrangeTrace,
    RhoWConstraints,
};
use crate::diffusion::{build_diffusion_basis, default_eps_diff, diffusion_spectrum, suggest_m, DiffusionBasis};
use crate::grid::{Subsample, SubsampleSpec, TimeGrid};
use crate::io::{self, Manifest};
use crate::kde::KdeModel;
use crate::models::{CavityConfig, CavityModel, DuffingConfig, DuffingModel, LinearDecay};
use crate::reduction::{kl_expand, kl_time_derivatives, pca_reduce, stack_x, QSamples};
use crate::residual::{learned_report, reference_report, ResidualReport};
use crate::sampler::{sample_unconstrained, IsdeParams, LearnedLatents};
use crate::scm::{build_training_dataset, ScmModel};
use crate::stats;
use crate::{PlomError, Result};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub id: String,
    #[serde(default)]
    pub params: toml::Table,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(default)]
    pub t0: f64,
    pub dt: f64,
    pub n_time: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub n_d: usize,
    /// Reference size for the residual normalization; defaults to n_d and
    /// must not exceed it.
    #[serde(default)]
    pub n_d_ref: Option<usize>,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_seed() -> u64 {
    42
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReductionSection {
    pub eps_kl: f64,
    pub eps_pca: f64,
}

impl Default for ReductionSection {
    fn default() -> Self {
        ReductionSection { eps_kl: 1e-6, eps_pca: 1e-6 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSection {
    /// Smoothing parameter; absent means the median-distance default.
    pub eps_diff: Option<f64>,
    /// Basis dimension; absent means the spectrum-decay rule.
    pub m: Option<usize>,
    pub decay_threshold: f64,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        DiffusionSection { eps_diff: None, m: None, decay_threshold: 0.1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstraintsSection {
    pub algo: u8,
    pub max_iter: usize,
    pub patience: usize,
    pub damping: bool,
}

impl Default for ConstraintsSection {
    fn default() -> Self {
        ConstraintsSection { algo: 3, max_iter: 20, patience: 5, damping: false }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    pub pdf_points: usize,
    pub envelope_component: usize,
    pub envelope_p_c: f64,
    pub envelope_max_realizations: usize,
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection {
            pdf_points: 201,
            envelope_component: 0,
            envelope_p_c: 0.98,
            envelope_max_realizations: 200,
        }
    }
}

fn default_subsample() -> SubsampleSpec {
    SubsampleSpec::Full
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    pub model: ModelSection,
    pub grid: GridSection,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub reduction: ReductionSection,
    #[serde(default)]
    pub diffusion: DiffusionSection,
    #[serde(default)]
    pub isde: IsdeParams,
    #[serde(default)]
    pub constraints: ConstraintsSection,
    #[serde(default = "default_subsample")]
    pub subsample: SubsampleSpec,
    #[serde(default)]
    pub report: ReportSection,
    #[serde(default)]
    pub output: Option<String>,
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| PlomError::Config(format!("config: {e}")))?;
        if cfg.version != CONFIG_VERSION {
            return Err(PlomError::Config(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        if let Some(r) = cfg.dataset.n_d_ref {
            if r > cfg.dataset.n_d || r < 2 {
                return Err(PlomError::Config(
                    "n_d_ref must satisfy 2 <= n_d_ref <= n_d".into(),
                ));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PlomError::io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    pub fn n_d_ref(&self) -> usize {
        self.dataset.n_d_ref.unwrap_or(self.dataset.n_d)
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.grid.t0, self.grid.dt, self.grid.n_time)
    }
}

/// Instantiate the configured model from the registry.
pub fn build_model(section: &ModelSection) -> Result<Box<dyn ScmModel>> {
    let params = toml::Value::Table(section.params.clone());
    match section.id.as_str() {
        "duffing" => {
            let cfg: DuffingConfig = params
                .try_into()
                .map_err(|e| PlomError::Config(format!("duffing params: {e}")))?;
            Ok(Box::new(DuffingModel::new(cfg)?))
        }
        "cavity2d" => {
            let cfg: CavityConfig = params
                .try_into()
                .map_err(|e| PlomError::Config(format!("cavity2d params: {e}")))?;
            Ok(Box::new(CavityModel::new(cfg)?))
        }
        "linear-decay" => Ok(Box::new(LinearDecay::default())),
        other => Err(PlomError::Config(format!("unknown model id `{other}`"))),
    }
}

fn hash_parts(parts: &[String]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    format!("{:x}", h.finalize())
}

fn section_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("config section serializes")
}

/// True when the stage directory already holds a valid artifact for the
/// given inputs hash. A manifest that exists but cannot be read or whose
/// array files fail their hashes is an integrity error, not a cache miss.
fn stage_is_current(dir: &Path, inputs_hash: &str) -> Result<bool> {
    if !dir.join(io::MANIFEST_FILE).exists() {
        return Ok(false);
    }
    let manifest = io::load_manifest(dir)?;
    if manifest.inputs_hash.as_deref() != Some(inputs_hash) {
        return Ok(false);
    }
    for entry in &manifest.arrays {
        io::read_array(dir, entry)?;
    }
    Ok(true)
}

/// Outcome bookkeeping of one pipeline run.
#[derive(Debug, Clone, Default, Serialize)]
pub struct PipelineSummary {
    /// (stage name, computed this run?)
    pub stages: Vec<(String, bool)>,
    pub out_dir: PathBuf,
}

impl PipelineSummary {
    pub fn computed_count(&self) -> usize {
        self.stages.iter().filter(|(_, c)| *c).count()
    }
}

/// Stage executor bound to a config and output root.
pub struct Pipeline {
    pub config: PipelineConfig,
    pub out: PathBuf,
    model: Box<dyn ScmModel>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, out_override: Option<&Path>) -> Result<Self> {
        let out = match out_override {
            Some(p) => p.to_path_buf(),
            None => PathBuf::from(config.output.clone().ok_or_else(|| {
                PlomError::Config("no output directory in config and none given".into())
            })?),
        };
        let model = build_model(&config.model)?;
        Ok(Pipeline { config, out, model })
    }

    pub fn model(&self) -> &dyn ScmModel {
        self.model.as_ref()
    }

    fn train_dir(&self) -> PathBuf {
        self.out.join("train")
    }

    fn kl_dir(&self) -> PathBuf {
        self.out.join("reduce").join("kl")
    }

    fn pca_dir(&self) -> PathBuf {
        self.out.join("reduce").join("pca")
    }

    fn learn_dir(&self) -> PathBuf {
        self.out.join("learn")
    }

    fn residual_dir(&self) -> PathBuf {
        self.out.join("residual")
    }

    fn constrained_dir(&self, algo: u8) -> PathBuf {
        self.out.join(format!("constrained_algo{algo}"))
    }

    fn report_dir(&self) -> PathBuf {
        self.out.join("report")
    }

    // -- train ------------------------------------------------------------

    fn train_hash(&self) -> String {
        hash_parts(&[
            "train".into(),
            section_json(&self.config.model),
            section_json(&self.config.grid),
            section_json(&self.config.dataset),
        ])
    }

    /// Generate and persist the training dataset.
    pub fn train(&self) -> Result<(Manifest, bool)> {
        let dir = self.train_dir();
        let hash = self.train_hash();
        if stage_is_current(&dir, &hash)? {
            return Ok((io::load_manifest(&dir)?, false));
        }
        let grid = self.config.time_grid()?;
        let dataset =
            build_training_dataset(self.model.as_ref(), self.config.dataset.n_d, &grid, self.config.dataset.seed)?;
        let manifest = io::save_dataset(&dir, &dataset, self.model.id(), Some(hash))?;
        Ok((manifest, true))
    }

    fn load_dataset(&self) -> Result<crate::scm::TrainingDataset> {
        io::load_dataset(&self.train_dir(), self.model.initial_state())
    }

    // -- reduce -----------------------------------------------------------

    fn reduce_hash(&self, train_manifest: &Manifest) -> String {
        hash_parts(&[
            "reduce".into(),
            section_json(&self.config.reduction),
            train_manifest.content_hash(),
        ])
    }

    /// KL expansion and PCA whitening, persisted under `reduce/`.
    pub fn reduce(&self) -> Result<(Manifest, Manifest, bool)> {
        let (train_manifest, _) = self.train()?;
        let hash = self.reduce_hash(&train_manifest);
        let (kl_dir, pca_dir) = (self.kl_dir(), self.pca_dir());
        if stage_is_current(&kl_dir, &hash)? && stage_is_current(&pca_dir, &hash)? {
            return Ok((io::load_manifest(&kl_dir)?, io::load_manifest(&pca_dir)?, false));
        }
        let dataset = self.load_dataset()?;
        let (kl, qs) = kl_expand(&dataset, self.config.reduction.eps_kl)?;
        let x = stack_x(&qs, &dataset.controls().view())?;
        let (pca, latents) = pca_reduce(&x.view(), kl.n_q(), self.config.reduction.eps_pca)?;
        let kl_manifest = io::save_kl_basis(&kl_dir, &kl, Some(hash.clone()))?;
        let pca_manifest = io::save_pca_basis(&pca_dir, &pca, &qs, &latents.eta, Some(hash))?;
        Ok((kl_manifest, pca_manifest, true))
    }

    fn load_kl(&self) -> Result<crate::reduction::KlBasis> {
        let mut kl = io::load_kl_basis(&self.kl_dir(), Some(self.model.initial_state()))?;
        kl_time_derivatives(&mut kl)?;
        Ok(kl)
    }

    // -- learn (unconstrained) ---------------------------------------------

    fn learn_hash(&self, pca_manifest: &Manifest) -> String {
        hash_parts(&[
            "learn".into(),
            section_json(&self.config.diffusion),
            section_json(&self.config.isde),
            pca_manifest.content_hash(),
        ])
    }

    /// Build the diffusion basis, run the unconstrained generator, persist
    /// latents plus the basis under `learn/`.
    pub fn learn(&self) -> Result<(Manifest, bool)> {
        let (_, pca_manifest, _) = self.reduce()?;
        let dir = self.learn_dir();
        let hash = self.learn_hash(&pca_manifest);
        if stage_is_current(&dir, &hash)? {
            return Ok((io::load_manifest(&dir)?, false));
        }
        let (pca, _, eta_d) = io::load_pca_basis(&self.pca_dir())?;
        let kde = KdeModel::new(&eta_d.view())?;
        let eps_diff = self
            .config
            .diffusion
            .eps_diff
            .unwrap_or_else(|| default_eps_diff(&eta_d.view()));
        let m = match self.config.diffusion.m {
            Some(m) => m,
            None => {
                let spectrum = diffusion_spectrum(&eta_d.view(), eps_diff)?;
                suggest_m(&spectrum, self.config.diffusion.decay_threshold)
            }
        };
        let basis = build_diffusion_basis(&eta_d.view(), eps_diff, m)?;
        let latents = sample_unconstrained(&kde, &basis, &self.config.isde)?;
        let manifest = self.save_learned(&dir, &latents, &basis, &pca, hash)?;
        Ok((manifest, true))
    }

    fn save_learned(
        &self,
        dir: &Path,
        latents: &LearnedLatents,
        basis: &DiffusionBasis,
        pca: &crate::reduction::PcaBasis,
        hash: String,
    ) -> Result<Manifest> {
        io::ensure_dir(dir)?;
        let (nu, n_mc) = (latents.nu(), latents.n_mc());
        let mut manifest = Manifest::new("learned");
        manifest.model_id = Some(self.model.id().to_string());
        manifest.dims.insert("nu".into(), nu);
        manifest.dims.insert("n_mc".into(), n_mc);
        manifest.dims.insert("m".into(), basis.m());
        manifest.inputs_hash = Some(hash);
        manifest.provenance = serde_json::json!({
            "lambda": latents.lambda.as_ref().map(|l| l.to_vec()),
            "isde": &latents.params,
            "dr_used": latents.dr_used,
            "fingerprints": &latents.fingerprints,
            "eps_diff": basis.eps_diff,
        });
        manifest.arrays.push(io::write_array(
            dir,
            "eta",
            &[nu, n_mc],
            latents.eta.as_slice().unwrap(),
        )?);
        // decoded controls for reporting
        let mut ws = Array2::zeros((pca.n_w, n_mc));
        for l in 0..n_mc {
            let (_, w) = pca.decode_x(latents.eta.column(l))?;
            ws.column_mut(l).assign(&w);
        }
        manifest.arrays.push(io::write_array(
            dir,
            "controls",
            &[pca.n_w, n_mc],
            ws.as_slice().unwrap(),
        )?);
        manifest.arrays.push(io::write_array(
            dir,
            "basis_g",
            &[basis.n_d(), basis.m()],
            basis.g.as_slice().unwrap(),
        )?);
        manifest.arrays.push(io::write_array(
            dir,
            "basis_a",
            &[basis.n_d(), basis.m()],
            basis.a.as_slice().unwrap(),
        )?);
        manifest.arrays.push(io::write_array(
            dir,
            "basis_kappa",
            &[basis.m()],
            basis.kappa.as_slice().unwrap(),
        )?);
        manifest.arrays.push(io::write_array(
            dir,
            "basis_b_diag",
            &[basis.n_d()],
            basis.b_diag.as_slice().unwrap(),
        )?);
        io::save_manifest(dir, &manifest)?;
        let rows: Vec<Vec<f64>> = basis
            .kappa
            .iter()
            .enumerate()
            .map(|(k, v)| vec![(k + 1) as f64, *v])
            .collect();
        io::write_csv(&dir.join("spectrum.csv"), &["index", "kappa"], &rows)?;
        Ok(manifest)
    }

    fn load_learned(&self, dir: &Path) -> Result<(LearnedLatents, DiffusionBasis)> {
        let manifest = io::load_manifest(dir)?;
        let eta = io::read_matrix(dir, manifest.array("eta")?)?;
        let g = io::read_matrix(dir, manifest.array("basis_g")?)?;
        let a = io::read_matrix(dir, manifest.array("basis_a")?)?;
        let kappa = Array1::from_vec(io::read_array(dir, manifest.array("basis_kappa")?)?);
        let b_diag = Array1::from_vec(io::read_array(dir, manifest.array("basis_b_diag")?)?);
        let prov = &manifest.provenance;
        let params: IsdeParams = serde_json::from_value(prov["isde"].clone())
            .map_err(|e| PlomError::Manifest(format!("isde provenance: {e}")))?;
        let fingerprints = serde_json::from_value(prov["fingerprints"].clone())
            .map_err(|e| PlomError::Manifest(format!("fingerprints: {e}")))?;
        let lambda = prov["lambda"]
            .as_array()
            .map(|vals| Array1::from_iter(vals.iter().map(|v| v.as_f64().unwrap_or(f64::NAN))));
        let latents = LearnedLatents {
            eta,
            lambda,
            params,
            dr_used: prov["dr_used"].as_f64().unwrap_or(f64::NAN),
            fingerprints,
        };
        let basis = DiffusionBasis {
            eps_diff: prov["eps_diff"].as_f64().unwrap_or(f64::NAN),
            g,
            a,
            kappa,
            b_diag,
        };
        Ok((latents, basis))
    }

    fn build_subsample(&self, dataset: &crate::scm::TrainingDataset) -> Result<Subsample> {
        let n_time = dataset.grid.n_time;
        match &self.config.subsample {
            SubsampleSpec::Full => Ok(Subsample::full(n_time)),
            SubsampleSpec::Stride { n_sp } => Subsample::stride(n_time, *n_sp),
            SubsampleSpec::LargestAmplitude { n_sp } => {
                let scores = crate::scm::mean_state_norms(dataset);
                Subsample::largest_amplitude(&scores, *n_sp)
            }
        }
    }

    // -- residual -----------------------------------------------------------

    fn residual_hash(&self, learn_manifest: &Manifest) -> String {
        hash_parts(&[
            "residual".into(),
            section_json(&self.config.subsample),
            format!("{}", self.config.n_d_ref()),
            learn_manifest.content_hash(),
        ])
    }

    /// Reference residual on the KL-reconstructed training set plus the
    /// unconstrained learned-set residual; persists both and the targets.
    pub fn residual(&self) -> Result<(Manifest, bool)> {
        let (learn_manifest, _) = self.learn()?;
        let dir = self.residual_dir();
        let hash = self.residual_hash(&learn_manifest);
        if stage_is_current(&dir, &hash)? {
            return Ok((io::load_manifest(&dir)?, false));
        }
        let dataset = self.load_dataset()?;
        let kl = self.load_kl()?;
        let (pca, qs, _) = io::load_pca_basis(&self.pca_dir())?;
        let subsample = self.build_subsample(&dataset)?;
        let n_ref = self.config.n_d_ref();

        let q_ref = QSamples {
            q: qs.q.slice(ndarray::s![.., ..n_ref]).to_owned(),
        };
        let ws = dataset.controls();
        let ws_ref = ws.slice(ndarray::s![.., ..n_ref]).to_owned();
        let reference = reference_report(self.model.as_ref(), &kl, &q_ref, &ws_ref.view(), &subsample)?;

        let (latents, _) = self.load_learned(&self.learn_dir())?;
        let learned = learned_report(
            self.model.as_ref(),
            &kl,
            &pca,
            &latents,
            &subsample,
            reference.rho_ref_mean,
        )?;

        io::ensure_dir(&dir)?;
        let mut manifest = Manifest::new("residual_report");
        manifest.model_id = Some(self.model.id().to_string());
        manifest.dims.insert("n_d_ref".into(), n_ref);
        manifest.dims.insert("n_sp".into(), subsample.len());
        manifest.inputs_hash = Some(hash);
        manifest.provenance = serde_json::json!({
            "rho_ref_mean": reference.rho_ref_mean,
            "b_c_rho": reference.b_c_rho,
            "subsample": &subsample,
            "kl_representation": true,
            "reference_l2": reference.l2_rho_hat(),
            "learned_mean_rho_hat": learned.mean_rho_hat(),
        });
        manifest.arrays.push(io::write_array(
            dir.as_path(),
            "reference_rho_hat",
            &[reference.rho_hat.len()],
            &reference.rho_hat,
        )?);
        manifest.arrays.push(io::write_array(
            dir.as_path(),
            "learned_rho_hat",
            &[learned.rho_hat.len()],
            &learned.rho_hat,
        )?);
        io::save_manifest(&dir, &manifest)?;
        write_report_csvs(&dir, &reference, &learned)?;
        Ok((manifest, true))
    }

    fn load_residual_reports(&self) -> Result<(f64, f64, Vec<f64>, Vec<f64>)> {
        let dir = self.residual_dir();
        let manifest = io::load_manifest(&dir)?;
        let rho_ref_mean = manifest.provenance["rho_ref_mean"]
            .as_f64()
            .ok_or_else(|| PlomError::Manifest("rho_ref_mean missing".into()))?;
        let b_c_rho = manifest.provenance["b_c_rho"]
            .as_f64()
            .ok_or_else(|| PlomError::Manifest("b_c_rho missing".into()))?;
        let reference = io::read_array(&dir, manifest.array("reference_rho_hat")?)?;
        let learned = io::read_array(&dir, manifest.array("learned_rho_hat")?)?;
        Ok((rho_ref_mean, b_c_rho, reference, learned))
    }

    // -- learn-constrained ---------------------------------------------------

    fn constrained_hash(&self, residual_manifest: &Manifest, algo: u8) -> String {
        hash_parts(&[
            "constrained".into(),
            format!("{algo}"),
            section_json(&self.config.constraints),
            residual_manifest.content_hash(),
        ])
    }

    /// Run the Lagrange iteration with the requested algorithm and persist
    /// the realizations of the best iteration plus the error trace.
    pub fn learn_constrained(&self, algo: Algo) -> Result<(Manifest, bool)> {
        let (residual_manifest, _) = self.residual()?;
        let dir = self.constrained_dir(algo.id());
        let hash = self.constrained_hash(&residual_manifest, algo.id());
        if stage_is_current(&dir, &hash)? {
            return Ok((io::load_manifest(&dir)?, false));
        }
        let dataset = self.load_dataset()?;
        let kl = self.load_kl()?;
        let (pca, _, eta_d) = io::load_pca_basis(&self.pca_dir())?;
        let kde = KdeModel::new(&eta_d.view())?;
        let (latents_unc, basis) = self.load_learned(&self.learn_dir())?;
        let (rho_ref_mean, _, _, learned_rho_hat) = self.load_residual_reports()?;

        // surrogate on the unconstrained learned set with normalized residuals
        let rho_norm: Vec<f64> = learned_rho_hat.iter().map(|v| v / rho_ref_mean).collect();
        let surrogate = build_rho_surrogate(&latents_unc.eta.view(), &rho_norm)?;

        let n_ref = self.config.n_d_ref();
        let ws = dataset.controls();
        let ws_ref = ws.slice(ndarray::s![.., ..n_ref]).to_owned();
        let subsample = self.build_subsample(&dataset)?;
        let q_ref = {
            let (_, qs, _) = io::load_pca_basis(&self.pca_dir())?;
            QSamples { q: qs.q.slice(ndarray::s![.., ..n_ref]).to_owned() }
        };
        let reference = reference_report(self.model.as_ref(), &kl, &q_ref, &ws_ref.view(), &subsample)?;
        let targets = assemble_targets(&ws_ref.view(), &reference)?;
        let constraints = RhoWConstraints::new(surrogate, &pca, targets)?;

        let options = LagrangeOptions {
            max_iter: self.config.constraints.max_iter,
            patience: self.config.constraints.patience,
            damping: self.config.constraints.damping,
        };
        let (trace, latents) =
            lagrange_iterate(algo, &constraints, &kde, &basis, &self.config.isde, &options)?;

        // residuals of the constrained set
        let constrained_rep = learned_report(
            self.model.as_ref(),
            &kl,
            &pca,
            &latents,
            &subsample,
            rho_ref_mean,
        )?;

        let mut manifest = self.save_learned(&dir, &latents, &basis, &pca, hash)?;
        manifest.provenance["trace"] = serde_json::to_value(&trace).unwrap();
        manifest.provenance["constrained_mean_rho_hat"] =
            serde_json::json!(constrained_rep.mean_rho_hat());
        manifest.arrays.push(io::write_array(
            dir.as_path(),
            "constrained_rho_hat",
            &[constrained_rep.rho_hat.len()],
            &constrained_rep.rho_hat,
        )?);
        io::save_manifest(&dir, &manifest)?;
        write_trace_csv(&dir, &trace)?;
        Ok((manifest, true))
    }

    pub fn load_trace(&self, algo: u8) -> Result<LagrangeTrace> {
        let manifest = io::load_manifest(&self.constrained_dir(algo))?;
        serde_json::from_value(manifest.provenance["trace"].clone())
            .map_err(|e| PlomError::Manifest(format!("trace: {e}")))
    }

    // -- report ---------------------------------------------------------------

    fn report_hash(&self, constrained_manifest: &Manifest) -> String {
        hash_parts(&[
            "report".into(),
            section_json(&self.config.report),
            constrained_manifest.content_hash(),
        ])
    }

    /// Densities, moments, residual summaries, and a confidence envelope.
    pub fn report(&self) -> Result<(PathBuf, bool)> {
        let algo = Algo::from_id(self.config.constraints.algo)?;
        let (constrained_manifest, _) = self.learn_constrained(algo)?;
        let dir = self.report_dir();
        let hash = self.report_hash(&constrained_manifest);
        if stage_is_current(&dir, &hash)? {
            return Ok((dir, false));
        }
        io::ensure_dir(&dir)?;
        let dataset = self.load_dataset()?;
        let kl = self.load_kl()?;
        let (pca, _, _) = io::load_pca_basis(&self.pca_dir())?;
        let learn_manifest = io::load_manifest(&self.learn_dir())?;
        let ws_unc = io::read_matrix(&self.learn_dir(), learn_manifest.array("controls")?)?;
        let cons_dir = self.constrained_dir(algo.id());
        let cons_manifest = io::load_manifest(&cons_dir)?;
        let ws_con = io::read_matrix(&cons_dir, cons_manifest.array("controls")?)?;
        let ws_train = dataset.controls();

        let mut rows_moments: Vec<Vec<f64>> = Vec::new();
        for (set_id, ws) in [(0.0, &ws_train), (1.0, &ws_unc), (2.0, &ws_con)] {
            for j in 0..ws.nrows() {
                let samples: Vec<f64> = ws.row(j).iter().copied().collect();
                let (mean, std) = stats::mean_std(&samples);
                let second = samples.iter().map(|v| v * v).sum::<f64>() / samples.len() as f64;
                rows_moments.push(vec![set_id, j as f64, mean, std, second]);
                if samples.len() >= 10 {
                    let grid = stats::density_grid(&samples, self.config.report.pdf_points)?;
                    let pdf = stats::scalar_pdf(&samples, &grid.view())?;
                    let rows: Vec<Vec<f64>> = grid
                        .iter()
                        .zip(pdf.iter())
                        .map(|(x, d)| vec![*x, *d])
                        .collect();
                    let name = match set_id as u8 {
                        0 => format!("pdf_w{}_train.csv", j + 1),
                        1 => format!("pdf_w{}_unconstrained.csv", j + 1),
                        _ => format!("pdf_w{}_constrained.csv", j + 1),
                    };
                    io::write_csv(&dir.join(name), &["w", "density"], &rows)?;
                }
            }
        }
        io::write_csv(
            &dir.join("moments.csv"),
            &["set", "component", "mean", "std", "second_moment"],
            &rows_moments,
        )?;

        // residual summaries and pdf of the normalized residual
        let (rho_ref_mean, b_c_rho, reference_rho_hat, learned_rho_hat) =
            self.load_residual_reports()?;
        let constrained_rho_hat =
            io::read_array(&cons_dir, cons_manifest.array("constrained_rho_hat")?)?;
        let mut summary = Vec::new();
        for (set_id, rh) in [
            (0.0, &reference_rho_hat),
            (1.0, &learned_rho_hat),
            (2.0, &constrained_rho_hat),
        ] {
            let (mean, std) = stats::mean_std(rh);
            let l2 = (rh.iter().map(|v| v * v).sum::<f64>() / rh.len() as f64).sqrt();
            summary.push(vec![set_id, mean, std, l2, mean / rho_ref_mean]);
        }
        summary.push(vec![3.0, rho_ref_mean, 0.0, 0.0, b_c_rho]);
        io::write_csv(
            &dir.join("residual_summary.csv"),
            &["set", "mean_rho_hat", "std_rho_hat", "l2_rho_hat", "mean_rho"],
            &summary,
        )?;
        for (name, rh) in [
            ("pdf_rho_unconstrained.csv", &learned_rho_hat),
            ("pdf_rho_constrained.csv", &constrained_rho_hat),
        ] {
            let rho: Vec<f64> = rh.iter().map(|v| v / rho_ref_mean).collect();
            if rho.len() >= 10 {
                let grid = stats::density_grid(&rho, self.config.report.pdf_points)?;
                let pdf = stats::scalar_pdf(&rho, &grid.view())?;
                let rows: Vec<Vec<f64>> =
                    grid.iter().zip(pdf.iter()).map(|(x, d)| vec![*x, *d]).collect();
                io::write_csv(&dir.join(name), &["rho", "density"], &rows)?;
            }
        }

        // confidence envelope of one state component over time
        let (latents_con, _) = self.load_learned(&cons_dir)?;
        let n_env = latents_con
            .n_mc()
            .min(self.config.report.envelope_max_realizations);
        if n_env >= 50 {
            let comp = self.config.report.envelope_component.min(kl.state_dim() - 1);
            let n_time = kl.n_time();
            let mut ensemble = Array2::zeros((n_env, n_time));
            for l in 0..n_env {
                let (q, _) = pca.decode_x(latents_con.eta.column(l))?;
                for n in 1..=n_time {
                    ensemble[[l, n - 1]] = kl.decode_state(q.view(), n)[comp];
                }
            }
            let (lo, mean, hi) =
                stats::confidence_envelope(&ensemble.view(), self.config.report.envelope_p_c)?;
            let rows: Vec<Vec<f64>> = (0..n_time)
                .map(|n| vec![kl.grid.time(n + 1), lo[n], mean[n], hi[n]])
                .collect();
            io::write_csv(
                &dir.join("envelope.csv"),
                &["t", "lower", "mean", "upper"],
                &rows,
            )?;
        }

        let mut manifest = Manifest::new("report");
        manifest.inputs_hash = Some(hash);
        io::save_manifest(&dir, &manifest)?;
        Ok((dir, true))
    }

    /// Execute the whole stage graph in order.
    pub fn run_all(&self) -> Result<PipelineSummary> {
        let mut summary = PipelineSummary {
            stages: Vec::new(),
            out_dir: self.out.clone(),
        };
        let (_, c) = self.train().map_err(|e| e.in_stage("train"))?;
        summary.stages.push(("train".into(), c));
        let (_, _, c) = self.reduce().map_err(|e| e.in_stage("reduce"))?;
        summary.stages.push(("reduce".into(), c));
        let (_, c) = self.learn().map_err(|e| e.in_stage("learn"))?;
        summary.stages.push(("learn".into(), c));
        let (_, c) = self.residual().map_err(|e| e.in_stage("residual"))?;
        summary.stages.push(("residual".into(), c));
        let algo = Algo::from_id(self.config.constraints.algo)?;
        let (_, c) = self
            .learn_constrained(algo)
            .map_err(|e| e.in_stage("learn-constrained"))?;
        summary.stages.push(("learn-constrained".into(), c));
        let (_, c) = self.report().map_err(|e| e.in_stage("report"))?;
        summary.stages.push(("report".into(), c));
        Ok(summary)
    }
}

fn write_report_csvs(dir: &Path, reference: &ResidualReport, learned: &ResidualReport) -> Result<()> {
    let rows: Vec<Vec<f64>> = reference
        .rho_hat
        .iter()
        .zip(reference.rho.iter())
        .enumerate()
        .map(|(l, (rh, r))| vec![(l + 1) as f64, *rh, *r])
        .collect();
    io::write_csv(&dir.join("reference.csv"), &["sample", "rho_hat", "rho"], &rows)?;
    let rows: Vec<Vec<f64>> = learned
        .rho_hat
        .iter()
        .zip(learned.rho.iter())
        .enumerate()
        .map(|(l, (rh, r))| vec![(l + 1) as f64, *rh, *r])
        .collect();
    io::write_csv(&dir.join("learned.csv"), &["sample", "rho_hat", "rho"], &rows)?;
    Ok(())
}

fn write_trace_csv(dir: &Path, trace: &LagrangeTrace) -> Result<()> {
    let p = trace.records.first().map_or(0, |r| r.lambda.len());
    let mut header: Vec<String> = vec!["i".into()];
    for k in 0..p {
        header.push(format!("lambda_{k}"));
    }
    header.extend(["err_R".into(), "err_W".into(), "err_RW".into()]);
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let rows: Vec<Vec<f64>> = trace
        .records
        .iter()
        .map(|r| {
            let mut row = vec![r.iteration as f64];
            row.extend(r.lambda.iter().copied());
            row.extend([r.err_r, r.err_w, r.err_rw]);
            row
        })
        .collect();
    io::write_csv(&dir.join("trace.csv"), &header_refs, &rows)
}
