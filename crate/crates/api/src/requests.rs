//! Farmer-initiated service requests and their validation.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Text,
    Voice,
    Video,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Product {
    Fertilizer,
    Seed,
    Pesticide,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestStatus {
    Open,
    Closed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    ExpertContact,
    ProductOrder,
    LoanApplication,
}

impl RequestKind {
    pub const ALL: [RequestKind; 3] = [Self::ExpertContact, Self::ProductOrder, Self::LoanApplication];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::ExpertContact => "expert_contact",
            Self::ProductOrder => "product_order",
            Self::LoanApplication => "loan_application",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    fn fields(self) -> &'static [&'static str] {
        match self {
            Self::ExpertContact => &["channel", "message"],
            Self::ProductOrder => &["product", "quantity"],
            Self::LoanApplication => &["applicant", "amount"],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RequestPayload {
    ExpertContact { channel: Channel, message: String },
    ProductOrder { product: Product, quantity: u64 },
    LoanApplication { applicant: String, amount: f64 },
}

impl RequestPayload {
    pub fn kind(&self) -> RequestKind {
        match self {
            Self::ExpertContact { .. } => RequestKind::ExpertContact,
            Self::ProductOrder { .. } => RequestKind::ProductOrder,
            Self::LoanApplication { .. } => RequestKind::LoanApplication,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceRequest {
    pub id: u64,
    #[serde(flatten)]
    pub payload: RequestPayload,
    pub status: RequestStatus,
    pub created_at: DateTime<Utc>,
}

/// Field name → problem, for every field that failed.
pub type FieldErrors = BTreeMap<String, String>;

fn enum_field<T: for<'de> Deserialize<'de>>(
    body: &Map<String, Value>,
    field: &str,
    allowed: &str,
    errors: &mut FieldErrors,
) -> Option<T> {
    match body.get(field) {
        None => {
            errors.insert(field.into(), "is required".into());
            None
        }
        Some(v) => match T::deserialize(v) {
            Ok(t) => Some(t),
            Err(_) => {
                errors.insert(field.into(), format!("must be one of {allowed}"));
                None
            }
        },
    }
}

fn text_field(body: &Map<String, Value>, field: &str, errors: &mut FieldErrors) -> Option<String> {
    match body.get(field) {
        Some(Value::String(s)) if !s.trim().is_empty() => Some(s.clone()),
        Some(Value::String(_)) => {
            errors.insert(field.into(), "must not be empty".into());
            None
        }
        Some(_) => {
            errors.insert(field.into(), "must be a string".into());
            None
        }
        None => {
            errors.insert(field.into(), "is required".into());
            None
        }
    }
}

/// Validates a creation body such as
/// `{"kind": "product_order", "product": "seed", "quantity": 3}`.
pub fn validate_new_request(body: &Value) -> Result<RequestPayload, FieldErrors> {
    let mut errors = FieldErrors::new();
    let Some(body) = body.as_object() else {
        errors.insert("body".into(), "must be a JSON object".into());
        return Err(errors);
    };
    let kind = match body.get("kind") {
        None => None,
        Some(Value::String(s)) => RequestKind::parse(s),
        Some(_) => None,
    };
    let Some(kind) = kind else {
        let problem = if body.contains_key("kind") {
            "must be one of expert_contact, product_order, loan_application"
        } else {
            "is required"
        };
        errors.insert("kind".into(), problem.into());
        return Err(errors);
    };
    for key in body.keys() {
        if key != "kind" && !kind.fields().contains(&key.as_str()) {
            errors.insert(key.clone(), format!("is not a field of {}", kind.as_str()));
        }
    }
    let payload = match kind {
        RequestKind::ExpertContact => {
            let channel = enum_field(body, "channel", "text, voice, video", &mut errors);
            let message = text_field(body, "message", &mut errors);
            channel
                .zip(message)
                .map(|(channel, message)| RequestPayload::ExpertContact { channel, message })
        }
        RequestKind::ProductOrder => {
            let product = enum_field(body, "product", "fertilizer, seed, pesticide", &mut errors);
            let quantity = match body.get("quantity") {
                Some(v) => match v.as_u64() {
                    Some(q) if q > 0 => Some(q),
                    _ => {
                        errors.insert("quantity".into(), "must be a positive integer".into());
                        None
                    }
                },
                None => {
                    errors.insert("quantity".into(), "is required".into());
                    None
                }
            };
            product
                .zip(quantity)
                .map(|(product, quantity)| RequestPayload::ProductOrder { product, quantity })
        }
        RequestKind::LoanApplication => {
            let applicant = text_field(body, "applicant", &mut errors);
            let amount = match body.get("amount") {
                Some(v) => match v.as_f64() {
                    Some(a) if a > 0.0 && a.is_finite() => Some(a),
                    _ => {
                        errors.insert("amount".into(), "must be a positive number".into());
                        None
                    }
                },
                None => {
                    errors.insert("amount".into(), "is required".into());
                    None
                }
            };
            applicant
                .zip(amount)
                .map(|(applicant, amount)| RequestPayload::LoanApplication { applicant, amount })
        }
    };
    match payload {
        Some(p) if errors.is_empty() => Ok(p),
        _ => Err(errors),
    }
}
