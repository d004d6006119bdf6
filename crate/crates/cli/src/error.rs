//! Error classification for exit codes and machine-readable records.

use advisor_core::backtest::BacktestError;
use advisor_core::baselines::BaselineError;
use advisor_core::drl::DrlError;
use advisor_core::forward::ForwardError;
use advisor_core::inverse::IpoError;
use advisor_core::market::MarketError;
use advisor_core::mv_env::EnvError;
use advisor_core::qp::QpError;

#[derive(Debug)]
pub enum CliError {
    /// Bad inputs: files, formats, configuration. Exit 3.
    Data(String),
    /// Solver or training failure. Exit 4.
    Solver(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Data(_) => 3,
            CliError::Solver(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Data(_) => "data",
            CliError::Solver(_) => "solver",
        }
    }

    pub fn machine_record(&self) -> String {
        let msg = match self {
            CliError::Data(m) | CliError::Solver(m) => m,
        };
        serde_json::json!({ "error": msg, "kind": self.kind() }).to_string()
    }
}

impl From<MarketError> for CliError {
    fn from(e: MarketError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EnvError> for CliError {
    fn from(e: EnvError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(format!("json: {e}"))
    }
}

impl From<IpoError> for CliError {
    fn from(e: IpoError) -> Self {
        CliError::Solver(e.to_string())
    }
}

impl From<QpError> for CliError {
    fn from(e: QpError) -> Self {
        CliError::Solver(e.to_string())
    }
}

impl From<ForwardError> for CliError {
    fn from(e: ForwardError) -> Self {
        CliError::Solver(e.to_string())
    }
}

impl From<DrlError> for CliError {
    fn from(e: DrlError) -> Self {
        CliError::Solver(e.to_string())
    }
}

impl From<BaselineError> for CliError {
    fn from(e: BaselineError) -> Self {
        CliError::Solver(e.to_string())
    }
}

impl From<BacktestError> for CliError {
    fn from(e: BacktestError) -> Self {
        match e {
            BacktestError::Market(m) => CliError::Data(m.to_string()),
            BacktestError::InvalidSpec(m) => CliError::Data(m),
            other => CliError::Solver(other.to_string()),
        }
    }
}
