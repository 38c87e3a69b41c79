//! Library side of the `mtrack` executable: run configuration and the
//! subcommand implementations, usable from tests without spawning.

pub mod commands;
pub mod config;

/// Short category for a failure, used in the one-line error report.
pub fn error_kind(err: &anyhow::Error) -> &'static str {
    use mtrack::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::InvalidBox(_) => "invalid-box",
                E::Shape(_) => "shape",
                E::Config(_) => "config",
                E::Precondition(_) => "precondition",
                E::Parse { .. } => "parse",
                E::MissingMetadata(_) => "missing-metadata",
                E::Numerical(_) => "numerical",
                E::Tracking(_) => "tracking",
                E::Checkpoint(_) => "checkpoint",
                E::Io { .. } => "io",
                E::Json(_) => "json",
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return "config";
        }
    }
    "error"
}

/// `error kind=<kind> msg="<cause chain joined by ': '>"` on a single line.
pub fn error_line(err: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for c in err.chain() {
        let s = c.to_string();
        // thiserror messages often embed their source already
        if !parts.last().is_some_and(|p| p.ends_with(&s)) {
            parts.push(s);
        }
    }
    let msg = parts.join(": ");
    let msg = msg.replace(['\n', '\r'], " ").replace('"', "'");
    format!("error kind={} msg=\"{}\"", error_kind(err), msg)
}
