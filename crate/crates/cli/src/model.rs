//! On-disk model handling: basename resolution, loading and saving the
//! spec-plus-weights pair, and the layered solver configuration.

use std::path::{Path, PathBuf};

use convmorph::container::peek_dtype;
use convmorph::ir::{parse_network, serialize_network, NetworkSpec};
use convmorph::morph::SolverOptions;
use convmorph::{DType, Error, Result, Scalar};

/// A model on disk is two sibling files sharing a basename: a JSON network
/// description and a binary weights container.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelPaths {
    pub spec: PathBuf,
    pub weights: PathBuf,
}

impl ModelPaths {
    /// Resolve a user-supplied model argument. The argument may be the
    /// bare basename or the path of either file; a trailing `.json` or
    /// `.weights` extension is stripped before the pair is derived.
    pub fn resolve(arg: &str) -> ModelPaths {
        let path = Path::new(arg);
        let base: PathBuf = match path.extension().and_then(|e| e.to_str()) {
            Some("json") | Some("weights") => path.with_extension(""),
            _ => path.to_path_buf(),
        };
        let mut spec = base.clone().into_os_string();
        spec.push(".json");
        let mut weights = base.into_os_string();
        weights.push(".weights");
        ModelPaths {
            spec: spec.into(),
            weights: weights.into(),
        }
    }

    /// Element type of the stored weights. An empty container defaults to
    /// `f32` so that freshly scaffolded models are still loadable.
    pub fn dtype(&self) -> Result<DType> {
        Ok(peek_dtype(&self.weights)?.unwrap_or(DType::F32))
    }

    pub fn load_spec(&self) -> Result<NetworkSpec> {
        let text = std::fs::read_to_string(&self.spec)?;
        parse_network(&text)
    }

    pub fn load_store<T: Scalar>(&self) -> Result<convmorph::container::WeightsStore<T>> {
        convmorph::container::WeightsStore::load(&self.weights)
    }

    /// Write both files, creating parent directories as needed.
    pub fn save<T: Scalar>(
        &self,
        net: &NetworkSpec,
        store: &convmorph::container::WeightsStore<T>,
    ) -> Result<()> {
        if let Some(parent) = self.spec.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(&self.spec, serialize_network(net))?;
        store.save(&self.weights)
    }
}

/// Optional solver flags shared by the morphing commands. Anything not
/// given on the command line falls back to the model's metadata
/// (`solver.tol`, `solver.max_iters`, `solver.seed`, `solver.ridge`) and
/// then to the built-in defaults.
#[derive(Debug, Clone, Copy, clap::Args)]
pub struct SolverFlags {
    /// Relative residual at which the kernel factorization stops.
    #[arg(long)]
    pub tol: Option<f64>,

    /// Iteration budget for the alternating solver.
    #[arg(long = "max-iters")]
    pub max_iters: Option<usize>,

    /// Seed for the solver's random initialisation.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Ridge damping added to the normal equations.
    #[arg(long)]
    pub ridge: Option<f64>,
}

fn metadata_value<T: std::str::FromStr>(net: &NetworkSpec, key: &str) -> Result<Option<T>> {
    match net.metadata.get(key) {
        None => Ok(None),
        Some(raw) => raw.parse().map(Some).map_err(|_| Error::Param {
            name: key.to_string(),
            message: format!("metadata value `{raw}` does not parse"),
        }),
    }
}

/// Layer the three configuration sources: defaults, then the model's
/// metadata block, then explicit command-line flags.
pub fn solver_options(net: &NetworkSpec, flags: &SolverFlags) -> Result<SolverOptions> {
    let mut opts = SolverOptions::default();
    if let Some(v) = metadata_value::<f64>(net, "solver.tol")? {
        opts.tol = v;
    }
    if let Some(v) = metadata_value::<usize>(net, "solver.max_iters")? {
        opts.max_iters = v;
    }
    if let Some(v) = metadata_value::<u64>(net, "solver.seed")? {
        opts.seed = v;
    }
    if let Some(v) = metadata_value::<f64>(net, "solver.ridge")? {
        opts.ridge = v;
    }
    if let Some(v) = flags.tol {
        opts.tol = v;
    }
    if let Some(v) = flags.max_iters {
        opts.max_iters = v;
    }
    if let Some(v) = flags.seed {
        opts.seed = v;
    }
    if let Some(v) = flags.ridge {
        opts.ridge = v;
    }
    Ok(opts)
}
