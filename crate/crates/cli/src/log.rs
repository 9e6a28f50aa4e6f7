//! Verbosity gate driven by the BRIDGEVQ_LOG environment variable:
//! quiet < error < info (default) < debug.

fn level() -> u8 {
    match std::env::var("BRIDGEVQ_LOG").as_deref() {
        Ok("quiet") => 0,
        Ok("error") => 1,
        Ok("debug") => 3,
        _ => 2,
    }
}

pub fn error(msg: &str) {
    if level() >= 1 {
        eprintln!("error: {msg}");
    }
}

pub fn info(msg: &str) {
    if level() >= 2 {
        eprintln!("{msg}");
    }
}

pub fn debug(msg: &str) {
    if level() >= 3 {
        eprintln!("debug: {msg}");
    }
}
