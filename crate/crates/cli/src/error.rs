use kvpersona::decoder::DecoderError;
use kvpersona::harness::BenchError;
use kvpersona::index::IndexError;
use kvpersona::kv::KvError;
use kvpersona::metadata::MetadataError;
use kvpersona::mining::MiningError;
use kvpersona::session::SessionError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Internal(_) => 3,
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        Self::Data(format!("{}: {e}", path.display()))
    }
}

impl From<MetadataError> for CliError {
    fn from(e: MetadataError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<MiningError> for CliError {
    fn from(e: MiningError) -> Self {
        match e {
            MiningError::InvalidParams(_) | MiningError::GridTooLarge { .. } => {
                Self::Usage(e.to_string())
            }
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<IndexError> for CliError {
    fn from(e: IndexError) -> Self {
        match e {
            IndexError::ZeroK | IndexError::DimTooSmall(_) => Self::Usage(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<DecoderError> for CliError {
    fn from(e: DecoderError) -> Self {
        match e {
            DecoderError::InvalidConfig(_) => Self::Usage(e.to_string()),
            _ => Self::Internal(e.to_string()),
        }
    }
}

impl From<KvError> for CliError {
    fn from(e: KvError) -> Self {
        match e {
            KvError::Decoder(d) => d.into(),
            KvError::DuplicateConcept(_) | KvError::EmptyPrefix => Self::Internal(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<SessionError> for CliError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::Kv(k) => k.into(),
            SessionError::Decoder(d) => d.into(),
            SessionError::Index(i) => i.into(),
            SessionError::EmptyQuery => Self::Usage(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Config(_) => Self::Usage(e.to_string()),
            BenchError::Session(s) => s.into(),
            BenchError::Decoder(d) => d.into(),
            BenchError::Index(i) => i.into(),
            BenchError::Mining(m) => m.into(),
        }
    }
}
