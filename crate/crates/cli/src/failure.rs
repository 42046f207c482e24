use blindsr_core::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    /// Bad flags or config; exit code 1.
    Usage,
    /// Failure while doing the work; exit code 2.
    Runtime,
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub message: String,
    /// Extra `field: reason` lines.
    pub details: Vec<String>,
}

pub type Outcome<T> = std::result::Result<T, Failure>;

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { kind: Kind::Usage, message: message.into(), details: Vec::new() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self { kind: Kind::Runtime, message: message.into(), details: Vec::new() }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            Kind::Usage => 1,
            Kind::Runtime => 2,
        }
    }

    /// Writes `error[usage]: ...` style lines to stderr.
    pub fn report(&self) {
        let tag = match self.kind {
            Kind::Usage => "usage",
            Kind::Runtime => "runtime",
        };
        eprintln!("error[{tag}]: {}", self.message);
        for d in &self.details {
            eprintln!("  field {d}");
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(fields) => Failure {
                kind: Kind::Usage,
                message: format!("invalid configuration ({} problem{})", fields.len(), if fields.len() == 1 { "" } else { "s" }),
                details: fields.iter().map(|f| f.to_string()).collect(),
            },
            e @ Error::Toml(_) => Failure::usage(e.to_string()),
            e => Failure::runtime(e.to_string()),
        }
    }
}
