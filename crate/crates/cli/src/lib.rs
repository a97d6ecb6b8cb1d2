//! Library half of the `switchtx` command: run configuration, the command
//! implementations and run manifests. `main.rs` only parses arguments.

pub mod commands;
pub mod config;
pub mod manifest;

pub use config::RunConfig;
pub use manifest::Manifest;

use switchtx::Error;

/// Process exit code for each error category; 1 is left for panics.
pub fn exit_code(e: &Error) -> i32 {
    match e.category() {
        "config" => 2,
        "io" => 3,
        "format" => 4,
        "compatibility" => 5,
        "lookup" => 6,
        "vocabulary" => 7,
        "numeric" => 8,
        "dimension" => 9,
        "contract" => 10,
        "undefined" => 11,
        _ => 1,
    }
}

/// The single stderr line a failing command prints.
pub fn error_line(e: &Error) -> String {
    serde_json::json!({ "error": e.category(), "message": e.to_string() }).to_string()
}
