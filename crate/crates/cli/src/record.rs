//! The stored result record.

use std::collections::BTreeSet;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use speedlab_core::coordinator::{build_report, ServerDescriptor};
use speedlab_core::engine::{EngineConfig, Flag, RawTestRecord, TestSpec};
use speedlab_core::flowmodel::{FlowParams, LinkModel};
use speedlab_core::metrics::{estimate_throughput, EstimationMethod, MetricReport, MetricsError};
use thiserror::Error;

/// Major schema version. Readers refuse records with any other major.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("malformed record: {0}")]
    Json(#[from] serde_json::Error),
    #[error("record has no schema_version")]
    MissingVersion,
    #[error("unsupported schema version {0} (this reader handles {SCHEMA_VERSION})")]
    UnsupportedVersion(u64),
    #[error("record does not reproduce: {0}")]
    NotReproducible(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Scheduled,
    User,
}

impl std::fmt::Display for Origin {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Origin::Scheduled => "scheduled",
            Origin::User => "user",
        })
    }
}

/// Model parameters behind a simulated result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSetup {
    pub link: LinkModel,
    pub flow: FlowParams,
}

/// How the numbers in a record were produced, fully expanded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Methodology {
    pub headline: EstimationMethod,
    pub methods: Vec<EstimationMethod>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub engine: Option<EngineConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationSetup>,
}

impl Methodology {
    pub fn standard() -> Self {
        Self {
            headline: EstimationMethod::steady_state(),
            methods: EstimationMethod::all_defaults(),
            engine: None,
            simulation: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodEstimate {
    pub method: EstimationMethod,
    pub bps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementResult {
    pub schema_version: u32,
    pub timestamp: DateTime<Utc>,
    pub origin: Origin,
    pub spec: TestSpec,
    pub raw: RawTestRecord,
    /// Headline report.
    pub report: MetricReport,
    /// Every configured method applied to the aggregate trace.
    pub estimates: Vec<MethodEstimate>,
    pub server: ServerDescriptor,
    pub flags: BTreeSet<Flag>,
    pub methodology: Methodology,
}

fn derive(raw: &RawTestRecord, methodology: &Methodology) -> Result<(MetricReport, Vec<MethodEstimate>), RecordError> {
    let report = build_report(raw, &methodology.headline).map_err(|e| match e {
        speedlab_core::coordinator::CoordinatorError::Metrics(m) => RecordError::Metrics(m),
        other => RecordError::NotReproducible(other.to_string()),
    })?;
    let estimates = methodology
        .methods
        .iter()
        .map(|m| {
            Ok(MethodEstimate {
                method: *m,
                bps: estimate_throughput(&raw.aggregate_trace, m)?,
            })
        })
        .collect::<Result<_, MetricsError>>()?;
    Ok((report, estimates))
}

impl MeasurementResult {
    /// Builds a record, deriving every number from `raw` and `methodology`.
    pub fn build(
        timestamp: DateTime<Utc>,
        origin: Origin,
        raw: RawTestRecord,
        server: ServerDescriptor,
        methodology: Methodology,
    ) -> Result<Self, RecordError> {
        let (report, estimates) = derive(&raw, &methodology)?;
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            timestamp,
            origin,
            spec: raw.spec.clone(),
            flags: raw.flags.clone(),
            raw,
            report,
            estimates,
            server,
            methodology,
        })
    }

    pub fn headline_bps(&self) -> Option<f64> {
        self.report.download_bps.or(self.report.upload_bps)
    }

    /// Recomputes the report and estimates from the stored trace and
    /// methodology and checks they match bit for bit.
    pub fn verify(&self) -> Result<(), RecordError> {
        let (report, estimates) = derive(&self.raw, &self.methodology)?;
        if report != self.report {
            return Err(RecordError::NotReproducible(format!(
                "report {:?} recomputes as {:?}",
                self.report, report
            )));
        }
        if estimates != self.estimates {
            return Err(RecordError::NotReproducible("estimates differ".into()));
        }
        if self.flags != self.raw.flags {
            return Err(RecordError::NotReproducible("flags differ from raw record".into()));
        }
        Ok(())
    }

    pub fn to_line(&self) -> Result<String, RecordError> {
        Ok(serde_json::to_string(self)?)
    }

    /// Parses one record, refusing unknown major versions before looking at
    /// anything else.
    pub fn from_line(line: &str) -> Result<Self, RecordError> {
        let value: serde_json::Value = serde_json::from_str(line)?;
        let version = value
            .get("schema_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or(RecordError::MissingVersion)?;
        if version != u64::from(SCHEMA_VERSION) {
            return Err(RecordError::UnsupportedVersion(version));
        }
        Ok(serde_json::from_str(line)?)
    }
}
