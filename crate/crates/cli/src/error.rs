use std::path::Path;

use serde::Serialize;

/// Failure categories, each with its own process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Config,
    Input,
    Io,
    Numerical,
    Dependency,
    Stage,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Config => 2,
            Category::Input => 3,
            Category::Io => 4,
            Category::Numerical => 5,
            Category::Dependency => 6,
            Category::Stage => 7,
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub category: Category,
    pub stage: Option<String>,
    pub message: String,
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    category: Category,
    exit_code: i32,
    stage: Option<&'a str>,
    message: &'a str,
}

impl CliError {
    pub fn new(category: Category, message: impl Into<String>) -> Self {
        Self {
            category,
            stage: None,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(Category::Config, message)
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::new(Category::Io, format!("{}: {e}", path.display()))
    }

    /// A stage was requested before the stage that produces its input.
    pub fn dependency(stage: &str, missing: &str, artifact: &Path) -> Self {
        Self {
            category: Category::Dependency,
            stage: Some(stage.to_string()),
            message: format!(
                "stage `{stage}` requires stage `{missing}` to have run first ({} not found)",
                artifact.display()
            ),
        }
    }

    pub fn in_stage(mut self, stage: &str) -> Self {
        self.stage.get_or_insert_with(|| stage.to_string());
        self
    }

    /// Single-line JSON record written to stderr on failure.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&ErrorRecord {
            category: self.category,
            exit_code: self.category.exit_code(),
            stage: self.stage.as_deref(),
            message: &self.message,
        })
        .expect("error record serializes")
    }
}

impl From<wwas_core::Error> for CliError {
    fn from(e: wwas_core::Error) -> Self {
        let category = match e.category() {
            "io" => Category::Io,
            "numerical" => Category::Numerical,
            _ => Category::Input,
        };
        Self::new(category, e.to_string())
    }
}
