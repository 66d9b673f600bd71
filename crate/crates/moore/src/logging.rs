//! Minimal stderr logging gated by MOORE_LOG_LEVEL in {error, info, debug}.

use std::sync::OnceLock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Level {
    Error = 0,
    Info = 1,
    Debug = 2,
}

pub fn level() -> Level {
    static LEVEL: OnceLock<Level> = OnceLock::new();
    *LEVEL.get_or_init(|| match std::env::var("MOORE_LOG_LEVEL").as_deref() {
        Ok("debug") => Level::Debug,
        Ok("error") => Level::Error,
        _ => Level::Info,
    })
}

pub fn info(msg: impl AsRef<str>) {
    if level() >= Level::Info {
        eprintln!("[info] {}", msg.as_ref());
    }
}

pub fn debug(msg: impl AsRef<str>) {
    if level() >= Level::Debug {
        eprintln!("[debug] {}", msg.as_ref());
    }
}

pub fn error(msg: impl AsRef<str>) {
    eprintln!("[error] {}", msg.as_ref());
}
