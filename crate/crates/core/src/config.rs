//! Experiment configuration in TOML.
//!
//! ```toml
//! seed = 7
//!
//! [game]
//! source = "small"          # small | network
//! coupled = true            # small only
//! # network only: graph file or synthetic surrogate, firms file or the
//! # built-in large-instance firms
//! # graph = "roads.txt"
//! # synthetic = { vertices = 43, roads = 51 }
//! # firms = "firms.txt"
//! market_capacity = 0.3
//!
//! [comm]
//! kind = "default"          # default | ring | uniform | file
//! # path = "comm.txt"
//!
//! [solver]
//! tau = 0.005
//! nu = 10
//! stop_tol = 1e-4
//! stop_norm = "euclidean"
//! mode = "nash"
//!
//! [sweep]
//! nu = [2, 4, 6]
//!
//! [output]
//! dir = "out"
//! ```
//!
//! Relative file paths are resolved against the directory of the config
//! file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cournot::{
    build_cournot_game, build_large_instance, build_price_matrix, build_ring_comm, build_small_example, parse_firms, synthetic_network,
    CournotGame, FirmSpec, MarketCapacity, TransportNetwork, LARGE_MARKET_CAPACITY,
};
use crate::projection::DEFAULT_TOL;
use crate::quality::{BestResponseOptions, EpsilonOptions};
use crate::{CommMatrix, Error, Mode, Result, SolverConfig, StopNorm};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub game: GameSection,
    #[serde(default)]
    pub comm: CommSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub quality: QualitySection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GameSource {
    #[default]
    Small,
    Network,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticGraph {
    pub vertices: usize,
    pub roads: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameSection {
    #[serde(default)]
    pub source: GameSource,
    #[serde(default)]
    pub coupled: bool,
    pub graph: Option<PathBuf>,
    pub synthetic: Option<SyntheticGraph>,
    pub firms: Option<PathBuf>,
    pub market_capacity: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommKind {
    /// The small example's matrix, or a ring for networks.
    #[default]
    Default,
    Ring,
    Uniform,
    File,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommSection {
    #[serde(default)]
    pub kind: CommKind,
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub tau: f64,
    pub nu: u32,
    pub stop_tol: f64,
    pub stop_norm: String,
    pub max_iter: usize,
    pub mode: String,
    pub record_every: usize,
    pub projection_tol: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        let d = SolverConfig::default();
        Self {
            tau: d.tau,
            nu: d.nu,
            stop_tol: d.stop_tol,
            stop_norm: d.stop_norm.to_string(),
            max_iter: d.max_iter,
            mode: d.mode.to_string(),
            record_every: d.record_every,
            projection_tol: DEFAULT_TOL,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default)]
    pub nu: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QualitySection {
    pub enabled: bool,
    pub feasibility_tol: f64,
    pub best_response_tol: f64,
    pub best_response_max_iter: usize,
    /// Samples for the monotonicity estimate printed by `validate`.
    pub monotonicity_samples: usize,
}

impl Default for QualitySection {
    fn default() -> Self {
        let e = EpsilonOptions::default();
        Self {
            enabled: true,
            feasibility_tol: e.feasibility_tol,
            best_response_tol: e.best_response.tol,
            best_response_max_iter: e.best_response.max_iter,
            monotonicity_samples: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

impl ExperimentConfig {
    /// Parses TOML; unknown keys and type mismatches are reported with
    /// their line.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start].matches('\n').count() + 1).unwrap_or(0);
            Error::Parse {
                line,
                msg: e.message().to_string(),
            }
        })?;
        cfg.check()?;
        Ok(cfg)
    }

    /// Loads a config and resolves its relative paths against the file's
    /// directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::parse(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.game.graph, &mut cfg.game.firms, &mut cfg.comm.path].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.output.dir.is_relative() {
            cfg.output.dir = base.join(&cfg.output.dir);
        }
        cfg.check_files()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<()> {
        self.solver_config()?.validate()?;
        if let Some(&bad) = self.sweep.nu.iter().find(|&&v| v < 1) {
            return Err(Error::InvalidInput(format!("sweep values must be at least 1, got {bad}")));
        }
        let g = &self.game;
        match g.source {
            GameSource::Small => {
                if g.graph.is_some() || g.synthetic.is_some() || g.firms.is_some() || g.market_capacity.is_some() {
                    return Err(Error::InvalidInput("game.graph, game.synthetic, game.firms and game.market_capacity apply to source = \"network\" only".into()));
                }
            }
            GameSource::Network => {
                if g.graph.is_some() == g.synthetic.is_some() {
                    return Err(Error::InvalidInput("source = \"network\" needs exactly one of game.graph or game.synthetic".into()));
                }
                if g.coupled {
                    return Err(Error::InvalidInput("game.coupled applies to source = \"small\"; networks use game.market_capacity".into()));
                }
                if let Some(k) = g.market_capacity {
                    if !(k > 0.0) {
                        return Err(Error::InvalidInput(format!("game.market_capacity must be positive, got {k}")));
                    }
                }
            }
        }
        if (self.comm.kind == CommKind::File) != self.comm.path.is_some() {
            return Err(Error::InvalidInput("comm.path is required with kind = \"file\" and allowed only then".into()));
        }
        Ok(())
    }

    fn check_files(&self) -> Result<()> {
        for p in [&self.game.graph, &self.game.firms, &self.comm.path].into_iter().flatten() {
            if !p.is_file() {
                return Err(Error::InvalidInput(format!("referenced file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn solver_config(&self) -> Result<SolverConfig> {
        let s = &self.solver;
        Ok(SolverConfig {
            tau: s.tau,
            nu: s.nu,
            stop_tol: s.stop_tol,
            stop_norm: s.stop_norm.parse::<StopNorm>()?,
            max_iter: s.max_iter,
            mode: s.mode.parse::<Mode>()?,
            record_every: s.record_every,
            projection_tol: s.projection_tol,
        })
    }

    pub fn epsilon_options(&self) -> EpsilonOptions {
        EpsilonOptions {
            feasibility_tol: self.quality.feasibility_tol,
            best_response: BestResponseOptions {
                tol: self.quality.best_response_tol,
                max_iter: self.quality.best_response_max_iter,
                seed: self.seed,
                ..Default::default()
            },
        }
    }

    /// Short SHA-256 of the canonical serialization. The output directory
    /// is left out, so identical experiments written to different places
    /// carry the same hash.
    pub fn hash(&self) -> String {
        let canonical = toml::to_string(&Self {
            output: OutputSection::default(),
            ..self.clone()
        })
        .expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Builds the game and its communication matrix.
    pub fn build(&self) -> Result<(CournotGame, CommMatrix)> {
        let (game, default_comm) = match self.game.source {
            GameSource::Small => {
                let (g, t) = build_small_example(self.game.coupled)?;
                (g, Some(t))
            }
            GameSource::Network => (self.build_network_game()?, None),
        };
        let n = game.game.num_agents();
        let comm = match self.comm.kind {
            CommKind::Default => match default_comm {
                Some(t) => t,
                None => build_ring_comm(n)?,
            },
            CommKind::Ring => build_ring_comm(n)?,
            CommKind::Uniform => CommMatrix::uniform(n),
            CommKind::File => CommMatrix::load(self.comm.path.as_ref().expect("checked"))?,
        };
        if comm.size() != n {
            return Err(Error::Dimension(format!("communication matrix is {0}x{0} for {n} firms", comm.size())));
        }
        Ok((game, comm))
    }

    fn build_network_game(&self) -> Result<CournotGame> {
        let g = &self.game;
        let net = match (&g.graph, g.synthetic) {
            (Some(path), _) => TransportNetwork::load(path)?,
            (None, Some(s)) => synthetic_network(s.vertices, s.roads, self.seed)?,
            (None, None) => unreachable!("checked"),
        };
        let capacity = g.market_capacity.unwrap_or(LARGE_MARKET_CAPACITY);
        match &g.firms {
            None => build_large_instance(&net, capacity),
            Some(path) => {
                let firms = parse_firms(&std::fs::read_to_string(path)?, net.vertices())?
                    .into_iter()
                    .map(|(loc, cap)| FirmSpec::canonical(loc, cap, &net, 2.0, 1.0, true))
                    .collect();
                let price = build_price_matrix(&net, 10.0, 1.0, 0.3);
                if !price.is_psd() {
                    return Err(Error::InvalidInput(format!(
                        "price slope matrix is not positive semidefinite (smallest eigenvalue {:e})",
                        price.min_eigenvalue
                    )));
                }
                let k = nalgebra::DVector::from_element(net.vertices(), capacity);
                build_cournot_game(&net, firms, price.model, MarketCapacity::All(k))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_small_example() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let (g, t) = cfg.build().unwrap();
        assert_eq!(g.game.num_agents(), 3);
        assert!(t.validate().unwrap().ok());
        assert_eq!(cfg.solver_config().unwrap(), SolverConfig::default());
    }

    #[test]
    fn full_config_round_trips() {
        let text = r#"
seed = 11
[game]
source = "network"
synthetic = { vertices = 43, roads = 51 }
[comm]
kind = "ring"
[solver]
tau = 0.05
nu = 4
stop_norm = "euclidean"
mode = "wardrop"
[sweep]
nu = [2, 4]
"#;
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.solver_config().unwrap().mode, Mode::Wardrop);
        let again = ExperimentConfig::parse(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.hash(), cfg.hash());
        let (g, t) = cfg.build().unwrap();
        assert_eq!(g.game.num_agents(), 5);
        assert_eq!(g.network.vertices(), 43);
        assert!(t.is_symmetric());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::parse("seed = 1").unwrap();
        let b = ExperimentConfig::parse("seed = 2").unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn diagnostics_name_the_line() {
        let err = ExperimentConfig::parse("seed = 1\n[solver]\ntau = \"fast\"\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = ExperimentConfig::parse("[solver]\nstep = 0.1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn rejects_inconsistent_sections() {
        for bad in [
            "[solver]\ntau = -1.0",
            "[solver]\nmode = \"cooperative\"",
            "[sweep]\nnu = [0, 2]",
            "[game]\nsource = \"network\"",
            "[game]\nsynthetic = { vertices = 5, roads = 4 }",
            "[comm]\nkind = \"file\"",
        ] {
            assert!(ExperimentConfig::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn missing_files_are_reported() {
        let dir = std::env::temp_dir().join(format!("aggnash-config-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("exp.toml");
        std::fs::write(&path, "[game]\nsource = \"network\"\ngraph = \"nowhere.txt\"\n").unwrap();
        let err = ExperimentConfig::load(&path).unwrap_err();
        assert!(err.to_string().contains("nowhere.txt"), "{err}");
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
