use std::fmt;

/// A failure with a machine-readable kind, for errors that do not come from
/// the library itself.
#[derive(Debug)]
pub struct Failure {
    pub kind: &'static str,
    pub msg: String,
}

impl Failure {
    pub fn new(kind: &'static str, msg: impl Into<String>) -> Self {
        Failure { kind, msg: msg.into() }
    }

    pub fn invalid_config(msg: impl Into<String>) -> Self {
        Self::new("invalid_config", msg)
    }

    pub fn missing_input(msg: impl Into<String>) -> Self {
        Self::new("missing_input", msg)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for Failure {}

/// Kind tag for an error chain: the first tagged cause wins.
pub fn kind_of(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return f.kind;
        }
        if let Some(e) = cause.downcast_ref::<diffrouter::Error>() {
            return e.kind();
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "internal"
}

/// The single line printed on failure: `error: kind=<kind> msg="<text>"`.
pub fn error_line(err: &anyhow::Error) -> String {
    let msg = format!("{err:#}").replace(['\n', '\r'], " ");
    format!("error: kind={} msg={:?}", kind_of(err), msg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::Context;

    #[test]
    fn library_kinds_survive_context() {
        let err = Err::<(), _>(diffrouter::Error::Refused("no".into()))
            .context("finetuning")
            .unwrap_err();
        assert_eq!(kind_of(&err), "refused");
        let line = error_line(&err);
        assert!(line.starts_with("error: kind=refused msg=\"finetuning: refused: no\""), "{line}");
    }

    #[test]
    fn messages_stay_on_one_line() {
        let err = anyhow::Error::new(Failure::invalid_config("a\n\"b\""));
        assert_eq!(error_line(&err), r#"error: kind=invalid_config msg="a \"b\"""#);
    }
}
