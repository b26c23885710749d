//! Chat-completion transport over HTTP. Speaks the widely used JSON schema:
//! a `messages` array whose user turn carries the prompt text plus the
//! images as base64 data URIs, answered by `choices[0].message.content`.

use base64::Engine as _;
use serde_json::json;

use stereovol_core::error::{Error, Result};
use stereovol_core::types::ImageRef;
use stereovol_core::vlm::{ChatTransport, VlmQuery};

pub const ENDPOINT_ENV: &str = "STEREOVOL_VLM_ENDPOINT";
pub const TOKEN_ENV: &str = "STEREOVOL_VLM_TOKEN";

pub struct HttpChatTransport {
    client: reqwest::blocking::Client,
    endpoint: String,
    token: Option<String>,
    model: String,
    temperature: f64,
}

impl HttpChatTransport {
    /// Endpoint and auth come from the environment so credentials stay out
    /// of argv and shell history.
    pub fn from_env(model: String, temperature: f64) -> Result<Self> {
        let endpoint = std::env::var(ENDPOINT_ENV).map_err(|_| {
            Error::InvalidConfig(format!(
                "{ENDPOINT_ENV} is not set; export the chat-completion URL or use --replay"
            ))
        })?;
        let token = std::env::var(TOKEN_ENV).ok();
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(120))
            .build()
            .map_err(|e| Error::Transport { attempts: 0, message: e.to_string() })?;
        Ok(HttpChatTransport { client, endpoint, token, model, temperature })
    }

    fn image_content(image: &ImageRef) -> Result<serde_json::Value> {
        let (bytes, mime) = match image {
            ImageRef::Path(p) => {
                let mime = match p.extension().and_then(|e| e.to_str()) {
                    Some("png") => "image/png",
                    Some("jpg") | Some("jpeg") => "image/jpeg",
                    _ => {
                        return Err(Error::DecodeFailure {
                            path: p.clone(),
                            message: "only png and jpeg files can be uploaded".into(),
                        })
                    }
                };
                (std::fs::read(p).map_err(|e| Error::io(p, e))?, mime)
            }
            ImageRef::Tensor(t) => {
                let mut img = image::RgbImage::new(t.width, t.height);
                for (x, y, px) in img.enumerate_pixels_mut() {
                    let rgb = t.pixel(x, y);
                    *px = image::Rgb(rgb.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
                }
                let mut bytes = std::io::Cursor::new(Vec::new());
                img.write_to(&mut bytes, image::ImageFormat::Png).map_err(|e| {
                    Error::Transport { attempts: 0, message: format!("png encode: {e}") }
                })?;
                (bytes.into_inner(), "image/png")
            }
        };
        let encoded = base64::engine::general_purpose::STANDARD.encode(bytes);
        Ok(json!({
            "type": "image_url",
            "image_url": { "url": format!("data:{mime};base64,{encoded}") }
        }))
    }
}

impl ChatTransport for HttpChatTransport {
    fn complete(&self, query: &VlmQuery) -> Result<String> {
        let mut content = vec![json!({ "type": "text", "text": query.prompt })];
        for image in &query.images {
            content.push(Self::image_content(image)?);
        }
        let body = json!({
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{ "role": "user", "content": content }],
        });
        let mut request = self.client.post(&self.endpoint).json(&body);
        if let Some(token) = &self.token {
            request = request.bearer_auth(token);
        }
        let response = request
            .send()
            .map_err(|e| Error::Transport { attempts: 1, message: e.to_string() })?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| Error::Transport { attempts: 1, message: e.to_string() })?;
        if !status.is_success() {
            return Err(Error::Transport {
                attempts: 1,
                message: format!("http {status}: {}", text.chars().take(200).collect::<String>()),
            });
        }
        let parsed: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Transport { attempts: 1, message: format!("bad json: {e}") })?;
        parsed["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| Error::Transport {
                attempts: 1,
                message: "response lacks choices[0].message.content".into(),
            })
    }

    fn describe(&self) -> String {
        // Endpoint host only: full URLs can carry keys in query strings.
        let host = self
            .endpoint
            .split("://")
            .nth(1)
            .and_then(|rest| rest.split('/').next())
            .unwrap_or("unknown");
        format!("http({host}, model={}, temperature={})", self.model, self.temperature)
    }
}
