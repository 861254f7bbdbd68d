//! `key = value` config files and `--set` overrides.

use std::path::Path;

use quadenhance::{Error, Result};

/// One `key = value` assignment with where it came from, for error messages.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub key: String,
    pub value: String,
    pub origin: String,
}

/// Parses config text. Blank lines and `#` comments are skipped.
pub fn parse_config(text: &str, origin: &str) -> Result<Vec<Assignment>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let a = parse_assignment(line, &format!("{origin}:{}", i + 1))?;
        out.push(a);
    }
    Ok(out)
}

pub fn read_config(path: &Path) -> Result<Vec<Assignment>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, &path.display().to_string())
}

/// Parses `key=value` (spaces allowed around `=`).
pub fn parse_assignment(s: &str, origin: &str) -> Result<Assignment> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("{origin}: expected `key = value`, found `{s}`")))?;
    let key = k.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("{origin}: empty key")));
    }
    Ok(Assignment {
        key: key.to_string(),
        value: v.trim().to_string(),
        origin: origin.to_string(),
    })
}

/// Collects the config file (if any) followed by `--set` overrides, so later
/// assignments win.
pub fn gather(file: Option<&Path>, sets: &[String]) -> Result<Vec<Assignment>> {
    let mut all = match file {
        Some(p) => read_config(p)?,
        None => Vec::new(),
    };
    for s in sets {
        all.push(parse_assignment(s, "--set")?);
    }
    Ok(all)
}

/// Applies assignments through a setter, tagging errors with their origin.
pub fn apply(assignments: &[Assignment], mut set: impl FnMut(&str, &str) -> Result<()>) -> Result<()> {
    for a in assignments {
        set(&a.key, &a.value).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", a.origin)),
            other => other,
        })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use quadenhance::TrainConfig;

    #[test]
    fn comments_and_spacing() {
        let a = parse_config("# hi\n\nepochs = 3  # trailing\nlr0=1e-3\n", "f").unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!((a[0].key.as_str(), a[0].value.as_str()), ("epochs", "3"));
        assert_eq!(a[1].origin, "f:4");
    }

    #[test]
    fn unknown_key_named() {
        let a = parse_config("epochz = 3\n", "cfg").unwrap();
        let mut c = TrainConfig::default();
        let err = apply(&a, |k, v| c.set(k, v)).unwrap_err();
        assert!(err.to_string().contains("epochz"), "{err}");
        assert!(err.to_string().contains("cfg:1"), "{err}");
        assert_eq!(err.exit_code(), 5);
    }

    #[test]
    fn missing_equals_is_config_error() {
        let err = parse_config("epochs 3\n", "cfg").unwrap_err();
        assert_eq!(err.category(), "config");
    }

    #[test]
    fn later_assignments_win() {
        let a = parse_config("epochs = 3\nepochs = 4\n", "f").unwrap();
        let mut c = TrainConfig::default();
        apply(&a, |k, v| c.set(k, v)).unwrap();
        assert_eq!(c.epochs, 4);
    }
}
