//! Building an [`Engine`] from short textual specs shared by the server and
//! the command line.
//!
//! Backends: `scripted` (built-in offline script), `script:<path>` (JSON
//! fixture), `remote:<model>` (chat-completions endpoint at
//! `SCM_LLM_BASE_URL`). Embedders: `hash`, `hash:<dim>`, `remote:<model>`
//! (embeddings endpoint at `SCM_EMBED_BASE_URL`).

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use scm_core::backend::{RemoteBackend, RemoteBackendConfig};
use scm_core::embedding::{RemoteEmbedder, RemoteEmbedderConfig, DEFAULT_HASH_DIMENSION};
use scm_core::{Engine, HashEmbedder, HeuristicTokenizer, PromptPack, ScriptedBackend};
use thiserror::Error;

pub const LLM_BASE_URL_ENV: &str = "SCM_LLM_BASE_URL";
pub const EMBED_BASE_URL_ENV: &str = "SCM_EMBED_BASE_URL";
const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("unrecognized {kind} spec {spec:?}")]
    Unrecognized { kind: &'static str, spec: String },
    #[error("building engine: {0}")]
    Build(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Scripted,
    ScriptFile(PathBuf),
    Remote { model: String },
}

impl FromStr for BackendSpec {
    type Err = SpecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            None if s == "scripted" => Ok(Self::Scripted),
            Some(("script", path)) if !path.is_empty() => Ok(Self::ScriptFile(path.into())),
            Some(("remote", model)) if !model.is_empty() => Ok(Self::Remote { model: model.into() }),
            _ => Err(SpecError::Unrecognized { kind: "backend", spec: s.into() }),
        }
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Scripted => f.write_str("scripted"),
            Self::ScriptFile(p) => write!(f, "script:{}", p.display()),
            Self::Remote { model } => write!(f, "remote:{model}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EmbedderSpec {
    Hash { dimension: usize },
    Remote { model: String },
}

impl FromStr for EmbedderSpec {
    type Err = SpecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SpecError::Unrecognized { kind: "embedder", spec: s.into() };
        match s.split_once(':') {
            None if s == "hash" => Ok(Self::Hash { dimension: DEFAULT_HASH_DIMENSION }),
            Some(("hash", dim)) => dim.parse().map(|dimension| Self::Hash { dimension }).map_err(|_| bad()),
            Some(("remote", model)) if !model.is_empty() => Ok(Self::Remote { model: model.into() }),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for EmbedderSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Hash { dimension } => write!(f, "hash:{dimension}"),
            Self::Remote { model } => write!(f, "remote:{model}"),
        }
    }
}

fn base_url(var: &str) -> String {
    std::env::var(var).unwrap_or_else(|_| DEFAULT_BASE_URL.to_string())
}

pub fn build_engine(
    backend: &BackendSpec,
    embedder: &EmbedderSpec,
    prompts_dir: Option<&Path>,
) -> Result<Engine, SpecError> {
    let build = |e: &dyn fmt::Display| SpecError::Build(e.to_string());
    let backend: scm_core::SharedBackend = match backend {
        BackendSpec::Scripted => Arc::new(ScriptedBackend::offline_default()),
        BackendSpec::ScriptFile(path) => Arc::new(
            ScriptedBackend::from_file(path).map_err(|e| SpecError::Build(format!("{}: {e}", path.display())))?,
        ),
        BackendSpec::Remote { model } => Arc::new(
            RemoteBackend::new(RemoteBackendConfig::new(base_url(LLM_BASE_URL_ENV), model.clone()))
                .map_err(|e| build(&e))?,
        ),
    };
    let embedder: scm_core::SharedEmbedder = match embedder {
        EmbedderSpec::Hash { dimension } => Arc::new(HashEmbedder::new(*dimension).map_err(|e| build(&e))?),
        EmbedderSpec::Remote { model } => Arc::new(
            RemoteEmbedder::new(RemoteEmbedderConfig::new(base_url(EMBED_BASE_URL_ENV), model.clone()))
                .map_err(|e| build(&e))?,
        ),
    };
    let prompts = match prompts_dir {
        Some(dir) => PromptPack::load_dir(dir).map_err(|e| build(&e))?,
        None => PromptPack::english(),
    };
    Ok(Engine {
        backend,
        embedder,
        tokenizer: Arc::new(HeuristicTokenizer),
        prompts: Arc::new(prompts),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specs_parse_and_print() {
        for s in ["scripted", "script:/tmp/x.json", "remote:gpt-x"] {
            assert_eq!(s.parse::<BackendSpec>().unwrap().to_string(), s);
        }
        for s in ["hash:64", "remote:embed-y"] {
            assert_eq!(s.parse::<EmbedderSpec>().unwrap().to_string(), s);
        }
        assert_eq!("hash".parse::<EmbedderSpec>().unwrap(), EmbedderSpec::Hash { dimension: 256 });
        assert!("bogus".parse::<BackendSpec>().is_err());
        assert!("hash:x".parse::<EmbedderSpec>().is_err());
        assert!("remote:".parse::<BackendSpec>().is_err());
    }

    #[test]
    fn small_hash_dimension_is_refused() {
        let err = build_engine(&BackendSpec::Scripted, &EmbedderSpec::Hash { dimension: 4 }, None);
        assert!(matches!(err, Err(SpecError::Build(_))));
    }
}
