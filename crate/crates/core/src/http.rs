//! Blocking JSON-over-HTTP helper with bounded retries and exponential
//! backoff, shared by the generation and aesthetic-scoring adapters.

use std::thread;
use std::time::Duration;

use base64::Engine;
use image::RgbImage;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("service unreachable after {attempts} attempt(s): {message}")]
    Unreachable { attempts: u32, message: String },
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("malformed response (attempt {attempts}): {message}")]
    Malformed { attempts: u32, message: String },
}

impl HttpError {
    pub fn attempts(&self) -> u32 {
        match self {
            HttpError::Unreachable { attempts, .. }
            | HttpError::Timeout { attempts }
            | HttpError::Malformed { attempts, .. } => *attempts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub timeout_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 3, initial_backoff_ms: 200, timeout_ms: 120_000 }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, retry: u32) -> Duration {
        Duration::from_millis(self.initial_backoff_ms.saturating_mul(1 << retry.min(16)))
    }
}

enum Attempt<T> {
    Done(T),
    Retry(HttpError),
    Fatal(HttpError),
}

/// POST `body` as JSON and decode the JSON reply, retrying transport
/// failures, timeouts and 5xx replies up to `policy.max_retries` times.
pub fn post_json<B: Serialize, R: DeserializeOwned>(
    url: &str,
    body: &B,
    policy: &RetryPolicy,
) -> Result<R, HttpError> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_millis(policy.timeout_ms)))
        .http_status_as_error(false)
        .build()
        .into();
    let mut attempt = 0;
    loop {
        attempt += 1;
        let outcome = match agent.post(url).send_json(body) {
            Err(ureq::Error::Timeout(_)) => Attempt::Retry(HttpError::Timeout { attempts: attempt }),
            Err(e) => Attempt::Retry(HttpError::Unreachable { attempts: attempt, message: e.to_string() }),
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                if status >= 500 {
                    Attempt::Retry(HttpError::Unreachable {
                        attempts: attempt,
                        message: format!("HTTP {status}"),
                    })
                } else if status >= 400 {
                    Attempt::Fatal(HttpError::Malformed {
                        attempts: attempt,
                        message: format!("HTTP {status}"),
                    })
                } else {
                    match resp.body_mut().read_json::<R>() {
                        Ok(r) => Attempt::Done(r),
                        Err(ureq::Error::Timeout(_)) => {
                            Attempt::Retry(HttpError::Timeout { attempts: attempt })
                        }
                        Err(e) => Attempt::Fatal(HttpError::Malformed {
                            attempts: attempt,
                            message: e.to_string(),
                        }),
                    }
                }
            }
        };
        match outcome {
            Attempt::Done(r) => return Ok(r),
            Attempt::Fatal(e) => return Err(e),
            Attempt::Retry(e) if attempt > policy.max_retries => return Err(e),
            Attempt::Retry(_) => thread::sleep(policy.backoff(attempt - 1)),
        }
    }
}

pub fn encode_png_b64(img: &RgbImage) -> String {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png).expect("in-memory png encode");
    base64::engine::general_purpose::STANDARD.encode(buf.into_inner())
}

pub fn decode_png_b64(data: &str) -> Result<RgbImage, String> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(data)
        .map_err(|e| format!("base64: {e}"))?;
    image::load_from_memory(&bytes).map(|i| i.to_rgb8()).map_err(|e| format!("image: {e}"))
}


#[cfg(test)]
mod tests {
    use super::testing::serve;
    use super::*;

    #[derive(Serialize)]
    struct Ping {
        n: u32,
    }

    #[derive(Deserialize, Debug, PartialEq)]
    struct Pong {
        n: u32,
    }

    fn fast() -> RetryPolicy {
        RetryPolicy { max_retries: 3, initial_backoff_ms: 1, timeout_ms: 5_000 }
    }

    #[test]
    fn retries_server_errors_then_succeeds() {
        let srv = serve(3, |i, body| {
            if i < 2 {
                (503, "{}".into())
            } else {
                let v: serde_json::Value = serde_json::from_str(body).unwrap();
                (200, format!("{{\"n\":{}}}", v["n"].as_u64().unwrap() + 1))
            }
        });
        let r: Pong = post_json(&srv.url, &Ping { n: 41 }, &fast()).unwrap();
        assert_eq!(r, Pong { n: 42 });
        assert_eq!(srv.requests.lock().unwrap().len(), 3);
    }

    #[test]
    fn gives_up_after_bounded_retries() {
        let srv = serve(4, |_, _| (500, "{}".into()));
        let err = post_json::<_, Pong>(&srv.url, &Ping { n: 1 }, &fast()).unwrap_err();
        assert!(matches!(err, HttpError::Unreachable { attempts: 4, .. }), "{err:?}");
    }

    #[test]
    fn malformed_reply_is_not_retried() {
        let srv = serve(1, |_, _| (200, "not json".into()));
        let err = post_json::<_, Pong>(&srv.url, &Ping { n: 1 }, &fast()).unwrap_err();
        assert!(matches!(err, HttpError::Malformed { attempts: 1, .. }));
    }

    #[test]
    fn unreachable_host() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/", listener.local_addr().unwrap());
        drop(listener);
        let err = post_json::<_, Pong>(&url, &Ping { n: 1 }, &fast()).unwrap_err();
        assert_eq!(err.attempts(), 4);
    }

    #[test]
    fn png_b64_roundtrip() {
        let mut img = RgbImage::new(3, 2);
        img.put_pixel(1, 1, image::Rgb([1, 2, 3]));
        assert_eq!(decode_png_b64(&encode_png_b64(&img)).unwrap(), img);
        assert!(decode_png_b64("!!").is_err());
    }
}
