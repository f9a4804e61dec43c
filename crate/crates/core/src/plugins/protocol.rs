//! Wire types. One JSON document per line in both directions; the first line
//! a plugin emits is its handshake.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::model::{
    EntityContent, EntityType, Enrichment, ExtractedEntity, ImageEntity, PluginRole, TableEntity,
    TextEntity, UrlPattern,
};
use crate::reconstruct::ReferenceReading;

pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Concurrency {
    Serial,
    Concurrent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Handshake {
    pub roles: Vec<PluginRole>,
    pub schema_version: String,
    pub concurrency: Concurrency,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

impl Handshake {
    pub fn supports(&self, role: PluginRole) -> bool {
        self.roles.contains(&role)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PluginRequest {
    pub request_id: String,
    pub role: PluginRole,
    pub entity_type: EntityType,
    pub region_id: String,
    /// Base64 PNG.
    pub crop: String,
    #[serde(default)]
    pub context: Vec<String>,
    pub schema_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PluginResponse {
    pub request_id: String,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl PluginResponse {
    pub fn success(request_id: impl Into<String>, payload: Value) -> Self {
        PluginResponse {
            request_id: request_id.into(),
            ok: true,
            payload: Some(payload),
            error: None,
        }
    }

    pub fn failure(request_id: impl Into<String>, error: impl Into<String>) -> Self {
        PluginResponse {
            request_id: request_id.into(),
            ok: false,
            payload: None,
            error: Some(error.into()),
        }
    }
}

/// A response payload after schema validation for its role.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Entity(ExtractedEntity),
    Reference(ReferenceReading),
    Enrichment(Enrichment),
}

impl Payload {
    /// Wire form. Extractor payloads carry only the entity content; the type
    /// is implied by the request.
    pub fn to_value(&self) -> Value {
        let v = match self {
            Payload::Entity(e) => match &e.content {
                EntityContent::Table(t) => serde_json::to_value(t),
                EntityContent::Image(i) => serde_json::to_value(i),
                EntityContent::Text(t) => serde_json::to_value(t),
            },
            Payload::Reference(r) => serde_json::to_value(r),
            Payload::Enrichment(e) => serde_json::to_value(e),
        };
        v.expect("payload types serialize")
    }
}

/// Parses and checks a payload against the schema for `role` and
/// `entity_type`. Text payloads get their url list normalized.
pub fn validate_payload(
    role: PluginRole,
    entity_type: EntityType,
    value: Value,
    urls: &UrlPattern,
) -> std::result::Result<Payload, String> {
    let schema = |e: serde_json::Error| format!("schema violation: {e}");
    match role {
        PluginRole::PrimaryExtractor | PluginRole::FallbackExtractor => {
            let entity = match entity_type {
                EntityType::Table => {
                    ExtractedEntity::table(serde_json::from_value::<TableEntity>(value).map_err(schema)?)
                }
                EntityType::Image => {
                    ExtractedEntity::image(serde_json::from_value::<ImageEntity>(value).map_err(schema)?)
                }
                t => {
                    let mut text: TextEntity = serde_json::from_value(value).map_err(schema)?;
                    urls.merge_into(&mut text);
                    ExtractedEntity::text(t, text)
                }
            };
            let problems = entity.violations(urls);
            if problems.is_empty() {
                Ok(Payload::Entity(entity))
            } else {
                Err(format!("schema violation: {}", problems.join("; ")))
            }
        }
        PluginRole::OcrReference => serde_json::from_value::<ReferenceReading>(value)
            .map(Payload::Reference)
            .map_err(schema),
        PluginRole::Enricher => serde_json::from_value::<Enrichment>(value)
            .map(Payload::Enrichment)
            .map_err(schema),
    }
}

/// Turns a raw response into a validated payload, or the failure message.
pub fn interpret_response(
    request: &PluginRequest,
    response: PluginResponse,
    urls: &UrlPattern,
) -> std::result::Result<Payload, String> {
    if response.request_id != request.request_id {
        return Err("response request_id does not match".to_string());
    }
    if !response.ok {
        return Err(response.error.unwrap_or_else(|| "plugin reported failure".to_string()));
    }
    let payload = response
        .payload
        .ok_or_else(|| "schema violation: ok response without payload".to_string())?;
    validate_payload(request.role, request.entity_type, payload, urls)
}
