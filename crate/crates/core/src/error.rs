use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("dataset generation error: {0}")]
    Generation(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("degenerate prompt ensemble for `{0}`: mean embedding is zero")]
    DegenerateEnsemble(String),

    #[error("duplicate category name `{0}`")]
    DuplicateName(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite loss component `{component}` = {value}")]
    NonFiniteLoss { component: &'static str, value: f64 },

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("toml parse error: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("toml write error: {0}")]
    TomlSer(#[from] toml::ser::Error),
}
