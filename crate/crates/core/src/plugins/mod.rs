//! Plugin roles, clients and the handles the orchestrator calls through.

pub mod mock;
pub mod protocol;
pub mod transport;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crate::config::{EndpointConfig, RavConfig};
use crate::error::{RavError, Result};
use crate::model::{AnchorCrop, EntityType, PluginCall, PluginRole, UrlPattern};
use crate::raster::Raster;
use crate::reconstruct::{ReferenceReader, ReferenceReading};

pub use mock::{
    jitter_crop, mock_extract, mock_extract_table, mock_extract_text, mock_fallback, region_seed,
    CorruptionSpec, GroundTruth, MockBehavior, MockClient, Script, ScriptedExtractor,
};
pub use protocol::{
    interpret_response, validate_payload, Concurrency, Handshake, Payload, PluginRequest,
    PluginResponse, SCHEMA_VERSION,
};
pub use transport::{serve_lines, HttpClient, SubprocessClient};

/// Anything that answers plugin requests. Implementations never panic on bad
/// input; every failure is an `ok = false` response.
pub trait PluginClient: Send + Sync {
    fn id(&self) -> &str;
    fn handshake(&self) -> &Handshake;
    fn call(&self, request: &PluginRequest, timeout: Duration) -> PluginResponse;
}

#[derive(Debug, Clone)]
pub struct Invocation {
    pub result: std::result::Result<Payload, String>,
    pub call: PluginCall,
}

/// A client bound to one role. Serial plugins get one request at a time.
pub struct PluginHandle {
    client: Arc<dyn PluginClient>,
    role: PluginRole,
    timeout: Duration,
    serial: Option<Mutex<()>>,
    next_id: AtomicU64,
    urls: UrlPattern,
    record_timings: bool,
}

impl PluginHandle {
    pub fn new(
        client: Arc<dyn PluginClient>,
        role: PluginRole,
        timeout: Duration,
        urls: UrlPattern,
        record_timings: bool,
    ) -> Result<Self> {
        if !client.handshake().supports(role) {
            return Err(RavError::Plugin(format!(
                "{} does not serve role {}",
                client.id(),
                role.as_str()
            )));
        }
        let serial = (client.handshake().concurrency == Concurrency::Serial).then(|| Mutex::new(()));
        Ok(PluginHandle {
            client,
            role,
            timeout,
            serial,
            next_id: AtomicU64::new(0),
            urls,
            record_timings,
        })
    }

    /// Convenience for in-process clients with default settings.
    pub fn in_process(client: Arc<dyn PluginClient>, role: PluginRole) -> Result<Self> {
        PluginHandle::new(
            client,
            role,
            Duration::from_secs(30),
            UrlPattern::default_pattern().clone(),
            false,
        )
    }

    pub fn id(&self) -> &str {
        self.client.id()
    }

    pub fn role(&self) -> PluginRole {
        self.role
    }

    pub fn invoke(
        &self,
        entity_type: EntityType,
        region_id: &str,
        crop: &Raster,
        context: &[String],
    ) -> Invocation {
        let n = self.next_id.fetch_add(1, Ordering::Relaxed);
        let request = PluginRequest {
            request_id: format!("{region_id}/{}/{n}", self.role.as_str()),
            role: self.role,
            entity_type,
            region_id: region_id.to_string(),
            crop: crop.to_base64_png(),
            context: context.to_vec(),
            schema_version: SCHEMA_VERSION.to_string(),
        };
        let started = Instant::now();
        let result = if self.client.handshake().schema_version != SCHEMA_VERSION {
            Err("schema_version mismatch".to_string())
        } else {
            let _guard = self.serial.as_ref().map(|m| m.lock().expect("serial lock"));
            let response = self.client.call(&request, self.timeout);
            interpret_response(&request, response, &self.urls)
        };
        let duration_ms = self.record_timings.then(|| started.elapsed().as_millis() as u64);
        Invocation {
            call: PluginCall {
                role: self.role,
                duration_ms,
                ok: result.is_ok(),
            },
            result,
        }
    }
}

impl ReferenceReader for PluginHandle {
    fn read(&self, anchor: &AnchorCrop) -> Result<ReferenceReading> {
        match self.invoke(EntityType::Text, anchor.region_id(), anchor.pixels(), &[]).result {
            Ok(Payload::Reference(r)) => Ok(r),
            Ok(_) => Err(RavError::ReferenceUnavailable("unexpected payload kind".into())),
            Err(e) => Err(RavError::ReferenceUnavailable(e)),
        }
    }
}

/// The four optional role handles of a run.
#[derive(Default)]
pub struct PluginSet {
    pub primary: Option<PluginHandle>,
    pub fallback: Option<PluginHandle>,
    pub ocr_reference: Option<PluginHandle>,
    pub enricher: Option<PluginHandle>,
}

pub fn build_client(endpoint: &EndpointConfig, seed: u64, timeout: Duration) -> Result<Arc<dyn PluginClient>> {
    Ok(match endpoint {
        EndpointConfig::Scripted { script, id, .. } => {
            let mut s = Script::load(script)?;
            if id.is_some() {
                s.id = id.clone();
            }
            Arc::new(ScriptedExtractor::new(s))
        }
        EndpointConfig::Mock {
            ground_truth,
            epsilon,
            p_row_merge,
            p_col_merge,
            p_row_drop,
            crop_jitter_px,
            ..
        } => {
            let spec = CorruptionSpec {
                epsilon: *epsilon,
                p_row_merge: *p_row_merge,
                p_col_merge: *p_col_merge,
                p_row_drop: *p_row_drop,
                crop_jitter_px: *crop_jitter_px,
                seed: 0,
            };
            spec.validate()?;
            Arc::new(MockClient::new(GroundTruth::load(ground_truth)?, MockBehavior::Corrupt(spec), seed))
        }
        EndpointConfig::MockFallback {
            ground_truth,
            recovery_quality,
            ..
        } => {
            if !(0.0..=1.0).contains(recovery_quality) {
                return Err(RavError::Config("recovery_quality must lie in [0, 1]".into()));
            }
            Arc::new(MockClient::new(
                GroundTruth::load(ground_truth)?,
                MockBehavior::Fallback {
                    recovery_quality: *recovery_quality,
                },
                seed,
            ))
        }
        EndpointConfig::Subprocess { command, args, .. } => {
            Arc::new(SubprocessClient::spawn(command, args, timeout)?)
        }
        EndpointConfig::Http { url, .. } => Arc::new(HttpClient::connect(url, timeout)?),
    })
}

impl PluginSet {
    /// Builds handles for every configured endpoint. Endpoints that need an
    /// API key are skipped when the key variable is unset, as are plugins
    /// whose handshake does not offer the requested role.
    pub fn from_config(cfg: &RavConfig) -> Result<Self> {
        let key_present = std::env::var(&cfg.api_key_env).is_ok_and(|v| !v.is_empty());
        let timeout = Duration::from_millis(cfg.plugin_timeout_ms);
        let urls = cfg.url_matcher()?;
        let build = |ep: &Option<EndpointConfig>, role: PluginRole| -> Result<Option<PluginHandle>> {
            let Some(ep) = ep else { return Ok(None) };
            if ep.requires_api_key() && !key_present {
                log::info!("{} skipped: {} not set", role.as_str(), cfg.api_key_env);
                return Ok(None);
            }
            let client = build_client(ep, cfg.seed, timeout)?;
            match PluginHandle::new(client, role, timeout, urls.clone(), cfg.record_timings) {
                Ok(h) => Ok(Some(h)),
                Err(e) => {
                    log::warn!("{e}; continuing without it");
                    Ok(None)
                }
            }
        };
        Ok(PluginSet {
            primary: build(&cfg.plugins.primary, PluginRole::PrimaryExtractor)?,
            fallback: build(&cfg.plugins.fallback, PluginRole::FallbackExtractor)?,
            ocr_reference: build(&cfg.plugins.ocr_reference, PluginRole::OcrReference)?,
            enricher: build(&cfg.plugins.enricher, PluginRole::Enricher)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;
    use std::collections::BTreeMap;

    fn scripted(entries: &[(&str, serde_json::Value)]) -> Arc<dyn PluginClient> {
        Arc::new(ScriptedExtractor::new(Script {
            id: Some("s".into()),
            responses: entries.iter().map(|(k, v)| (k.to_string(), v.clone())).collect::<BTreeMap<_, _>>(),
        }))
    }

    #[test]
    fn scripted_handle_returns_payload_and_unknown_fails() {
        let payload = json!({"text": "hello"});
        let h = PluginHandle::in_process(scripted(&[("r1", payload)]), PluginRole::PrimaryExtractor).unwrap();
        let crop = Raster::filled_gray(4, 4, 255);
        let ok = h.invoke(EntityType::Text, "r1", &crop, &[]);
        assert!(ok.call.ok);
        assert_eq!(ok.call.duration_ms, None);
        let missing = h.invoke(EntityType::Text, "r2", &crop, &[]);
        assert!(!missing.call.ok);
        assert_eq!(missing.result.unwrap_err(), "unknown region");
    }

    struct Versioned(Handshake);

    impl PluginClient for Versioned {
        fn id(&self) -> &str {
            "v"
        }
        fn handshake(&self) -> &Handshake {
            &self.0
        }
        fn call(&self, request: &PluginRequest, _t: Duration) -> PluginResponse {
            PluginResponse::success(&request.request_id, json!({"text": "x"}))
        }
    }

    #[test]
    fn schema_version_mismatch_is_failure() {
        let client = Arc::new(Versioned(Handshake {
            roles: vec![PluginRole::OcrReference],
            schema_version: "0".into(),
            concurrency: Concurrency::Serial,
            id: None,
        }));
        let h = PluginHandle::in_process(client, PluginRole::OcrReference).unwrap();
        let inv = h.invoke(EntityType::Text, "r", &Raster::filled_gray(2, 2, 0), &[]);
        assert_eq!(inv.result.unwrap_err(), "schema_version mismatch");
    }

    #[test]
    fn unsupported_role_rejected() {
        let client = Arc::new(Versioned(Handshake {
            roles: vec![PluginRole::OcrReference],
            schema_version: SCHEMA_VERSION.into(),
            concurrency: Concurrency::Concurrent,
            id: None,
        }));
        assert!(PluginHandle::in_process(client, PluginRole::Enricher).is_err());
    }
}
