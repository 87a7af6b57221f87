//! Error classification and process exit codes.

use higine::baselines::BaselineError;
use higine::cell_table::TableError;
use higine::gnn::GnnError;
use higine::graph_builder::{DumpError, GraphError};
use higine::pipeline::PipelineError;
use higine::survival_metrics::MetricsError;
use higine::synth::SynthError;

/// What went wrong, as far as the caller of the binary cares.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags or configuration files. Exit code 2.
    #[error("config error: {0}")]
    Config(String),
    /// Unreadable or inconsistent input data. Exit code 3.
    #[error("data error: {0}")]
    Data(String),
    /// A numerical procedure failed or diverged. Exit code 4.
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl From<TableError> for CliError {
    fn from(e: TableError) -> Self {
        match e {
            TableError::InvalidConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::InvalidConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<GnnError> for CliError {
    fn from(e: GnnError) -> Self {
        match e {
            GnnError::InvalidConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::NonConvergence(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::InvalidConfig(_) | PipelineError::TooFewPatients { .. } => CliError::Config(e.to_string()),
            PipelineError::Numeric(_) => CliError::Numeric(e.to_string()),
            PipelineError::Model(inner) => inner.into(),
            PipelineError::Graph(inner) => inner.into(),
            PipelineError::Table(inner) => inner.into(),
            PipelineError::Metrics(inner) => inner.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<BaselineError> for CliError {
    fn from(e: BaselineError) -> Self {
        match e {
            BaselineError::UnknownMethod(_) => CliError::Config(e.to_string()),
            BaselineError::Numeric(_) => CliError::Numeric(e.to_string()),
            BaselineError::InvalidInput(_) => CliError::Data(e.to_string()),
            BaselineError::Pipeline(inner) => inner.into(),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::InvalidConfig(_) => CliError::Config(e.to_string()),
            SynthError::Io { .. } => CliError::Data(e.to_string()),
        }
    }
}

impl From<DumpError> for CliError {
    fn from(e: DumpError) -> Self {
        CliError::Data(e.to_string())
    }
}
