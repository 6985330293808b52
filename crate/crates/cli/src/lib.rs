//! Command-line front end for the terraseg pipeline.

pub mod commands;
pub mod config;

pub use commands::dispatch;
pub use config::{parse_config, Command, RunConfig};

/// One-line, tab-separated failure report: `error<TAB>kind<TAB>message`.
pub fn error_line(err: &terraseg::Error) -> String {
    let msg: String = err.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
    format!("error\t{}\t{}", err.kind(), msg.replace('\t', " "))
}
