use std::fmt;

use serde::Serialize;

/// Failure class, doubling as the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Config = 2,
    Data = 3,
    Numeric = 4,
    Validation = 5,
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(kind: Kind, error: impl Into<anyhow::Error>) -> Self {
        Self {
            kind,
            error: error.into(),
        }
    }

    pub fn msg(kind: Kind, message: impl fmt::Display) -> Self {
        Self::new(kind, anyhow::anyhow!("{message}"))
    }

    pub fn code(&self) -> i32 {
        self.kind as i32
    }

    /// Machine-readable record printed on stderr.
    pub fn record(&self) -> String {
        let causes: Vec<String> = self.error.chain().map(ToString::to_string).collect();
        serde_json::json!({
            "error": {
                "kind": self.kind,
                "code": self.code(),
                "message": format!("{:#}", self.error),
                "causes": causes,
            }
        })
        .to_string()
    }
}

pub trait ResultExt<T> {
    fn kind(self, kind: Kind) -> Result<T, Failure>;
    fn with_context_kind<C: fmt::Display + Send + Sync + 'static>(
        self,
        kind: Kind,
        context: impl FnOnce() -> C,
    ) -> Result<T, Failure>;
}

impl<T, E> ResultExt<T> for Result<T, E>
where
    E: Into<anyhow::Error>,
{
    fn kind(self, kind: Kind) -> Result<T, Failure> {
        self.map_err(|e| Failure::new(kind, e))
    }

    fn with_context_kind<C: fmt::Display + Send + Sync + 'static>(
        self,
        kind: Kind,
        context: impl FnOnce() -> C,
    ) -> Result<T, Failure> {
        self.map_err(|e| Failure::new(kind, e.into().context(context())))
    }
}
