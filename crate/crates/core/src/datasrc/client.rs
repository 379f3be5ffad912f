//! Client for an external text-to-image generation service.
//!
//! Protocol: `POST <endpoint>/generate` with JSON
//! `{prompt, seed, guidance_scale, steps}`; the service answers JSON
//! `{width, height, pixels}` where `pixels` is base64 of little-endian f32
//! RGB (interleaved, row-major) in [0,1]. Responses are resized to 32x32 by
//! area averaging. No retries; failures surface as transport errors tagged
//! with a request id derived from the prompt and seed.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnkit::io::fnv1a_hex;
use crate::nnkit::tensor::Tensor;

pub const DEFAULT_GUIDANCE_SCALE: f64 = 3.5;
const OUT: usize = 32;

#[derive(Debug, Clone, Serialize)]
pub struct GenRequest {
    pub prompt: String,
    pub seed: u64,
    pub guidance_scale: f64,
    pub steps: u32,
}

impl GenRequest {
    pub fn new(prompt: impl Into<String>, seed: u64) -> Result<GenRequest> {
        GenRequest::with_options(prompt, seed, DEFAULT_GUIDANCE_SCALE, 20)
    }

    pub fn with_options(
        prompt: impl Into<String>,
        seed: u64,
        guidance_scale: f64,
        steps: u32,
    ) -> Result<GenRequest> {
        if !(guidance_scale > 0.0) {
            return Err(Error::contract(format!(
                "guidance scale must be positive, got {guidance_scale}"
            )));
        }
        if steps == 0 {
            return Err(Error::contract("generation steps must be positive"));
        }
        Ok(GenRequest {
            prompt: prompt.into(),
            seed,
            guidance_scale,
            steps,
        })
    }

    /// Stable id correlating a request with server-side logs.
    pub fn request_id(&self) -> String {
        let mut bytes = self.prompt.as_bytes().to_vec();
        bytes.extend_from_slice(&self.seed.to_le_bytes());
        fnv1a_hex(&bytes)
    }
}

#[derive(Deserialize)]
struct GenResponse {
    width: u32,
    height: u32,
    pixels: String,
}

fn transport(id: &str, message: impl Into<String>) -> Error {
    Error::Transport {
        request_id: id.to_string(),
        message: message.into(),
    }
}

/// Area-average resize of interleaved RGB `[H,W,3]` pixels to a planar
/// `[3,32,32]` tensor. Exact fractional-overlap box integration.
fn resize_area(pixels: &[f32], width: usize, height: usize) -> Result<Tensor> {
    let mut out = Tensor::zeros(&[3, OUT, OUT]);
    let sx = width as f64 / OUT as f64;
    let sy = height as f64 / OUT as f64;
    let data = out.data_mut();
    for oy in 0..OUT {
        let y0 = oy as f64 * sy;
        let y1 = y0 + sy;
        for ox in 0..OUT {
            let x0 = ox as f64 * sx;
            let x1 = x0 + sx;
            let mut acc = [0.0f64; 3];
            let mut area = 0.0f64;
            let iy0 = y0.floor() as usize;
            let iy1 = (y1.ceil() as usize).min(height);
            let ix0 = x0.floor() as usize;
            let ix1 = (x1.ceil() as usize).min(width);
            for iy in iy0..iy1 {
                let hy = (y1.min(iy as f64 + 1.0) - y0.max(iy as f64)).max(0.0);
                for ix in ix0..ix1 {
                    let wx = (x1.min(ix as f64 + 1.0) - x0.max(ix as f64)).max(0.0);
                    let weight = hy * wx;
                    let base = (iy * width + ix) * 3;
                    for c in 0..3 {
                        acc[c] += pixels[base + c] as f64 * weight;
                    }
                    area += weight;
                }
            }
            for c in 0..3 {
                data[c * OUT * OUT + oy * OUT + ox] = (acc[c] / area) as f32;
            }
        }
    }
    Ok(out)
}

/// Issue one generation request and return the resized `[3,32,32]` image.
pub fn generate_external(req: &GenRequest, endpoint: &str) -> Result<Tensor> {
    let id = req.request_id();
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(60)))
        .build()
        .into();
    let url = format!("{}/generate", endpoint.trim_end_matches('/'));
    let mut resp = agent
        .post(&url)
        .send_json(req)
        .map_err(|e| transport(&id, format!("POST {url}: {e}")))?;
    let body: GenResponse = resp
        .body_mut()
        .read_json()
        .map_err(|e| transport(&id, format!("malformed response body: {e}")))?;
    let (w, h) = (body.width as usize, body.height as usize);
    if w == 0 || h == 0 || w > 4096 || h > 4096 {
        return Err(transport(&id, format!("implausible image size {w}x{h}")));
    }
    let raw = base64::engine::general_purpose::STANDARD
        .decode(body.pixels.as_bytes())
        .map_err(|e| transport(&id, format!("pixels field is not base64: {e}")))?;
    let expect = w * h * 3 * 4;
    if raw.len() != expect {
        return Err(transport(
            &id,
            format!("pixel payload is {} bytes, expected {expect}", raw.len()),
        ));
    }
    let floats: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if floats.iter().any(|v| !v.is_finite()) {
        return Err(transport(&id, "non-finite pixel values"));
    }
    resize_area(&floats, w, h)
}

/// Generate a batch of images with bounded parallelism, preserving request
/// order in the output. The first failure aborts the batch.
pub fn generate_pool(
    requests: &[GenRequest],
    endpoint: &str,
    parallel: usize,
) -> Result<Vec<Tensor>> {
    let parallel = parallel.clamp(1, 64);
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<Tensor>>>> =
        Mutex::new((0..requests.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..parallel.min(requests.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= requests.len() {
                    break;
                }
                let result = generate_external(&requests[i], endpoint);
                slots.lock().expect("worker panicked").as_mut_slice()[i] = Some(result);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|slot| slot.expect("every request was claimed"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    /// Minimal single-use HTTP server for the protocol fixture.
    fn serve_once(response_body: String) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut content_len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    content_len = v.trim().parse().unwrap();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut body = vec![0u8; content_len];
            reader.read_exact(&mut body).unwrap();
            let mut stream = reader.into_inner();
            let reply = format!(
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n{}",
                response_body.len(),
                response_body
            );
            stream.write_all(reply.as_bytes()).unwrap();
            format!("{request_line}{}", String::from_utf8_lossy(&body))
        });
        (format!("http://{addr}"), handle)
    }

    fn fixture_pixels(w: usize, h: usize) -> (String, Vec<f32>) {
        let mut floats = Vec::with_capacity(w * h * 3);
        for i in 0..w * h * 3 {
            floats.push((i % 17) as f32 / 16.0);
        }
        let bytes: Vec<u8> = floats.iter().flat_map(|v| v.to_le_bytes()).collect();
        (
            base64::engine::general_purpose::STANDARD.encode(&bytes),
            floats,
        )
    }

    #[test]
    fn fixture_round_trip_resizes_bitwise_stably() {
        let (b64, floats) = fixture_pixels(32, 32);
        let body = format!("{{\"width\":32,\"height\":32,\"pixels\":\"{b64}\"}}");
        let (endpoint, server) = serve_once(body);
        let req = GenRequest::new("photo of a ruby.", 7).unwrap();
        let img = generate_external(&req, &endpoint).unwrap();
        let seen = server.join().unwrap();
        assert!(seen.starts_with("POST /generate"));
        // default guidance scale travels in the request body
        let body_start = seen.find('{').unwrap();
        let sent: serde_json::Value = serde_json::from_str(&seen[body_start..]).unwrap();
        assert_eq!(sent["guidance_scale"], 3.5);
        assert_eq!(sent["prompt"], "photo of a ruby.");
        assert_eq!(sent["seed"], 7);
        // 32x32 source: area averaging is the identity, planar vs interleaved
        for c in 0..3 {
            for p in 0..32 * 32 {
                assert_eq!(img.data()[c * 1024 + p], floats[p * 3 + c]);
            }
        }
        // resizing is deterministic
        let (b64, _) = fixture_pixels(32, 32);
        let body = format!("{{\"width\":32,\"height\":32,\"pixels\":\"{b64}\"}}");
        let (endpoint, _server) = serve_once(body);
        let img2 = generate_external(&req, &endpoint).unwrap();
        assert_eq!(img, img2);
    }

    #[test]
    fn downscaling_averages_areas() {
        // 64x64 constant blocks average to their block value
        let w = 64;
        let mut floats = vec![0.0f32; w * w * 3];
        for y in 0..w {
            for x in 0..w {
                let v = if x < 32 { 0.25 } else { 0.75 };
                for c in 0..3 {
                    floats[(y * w + x) * 3 + c] = v;
                }
            }
        }
        let bytes: Vec<u8> = floats.iter().flat_map(|v| v.to_le_bytes()).collect();
        let b64 = base64::engine::general_purpose::STANDARD.encode(&bytes);
        let body = format!("{{\"width\":64,\"height\":64,\"pixels\":\"{b64}\"}}");
        let (endpoint, _server) = serve_once(body);
        let req = GenRequest::new("x", 1).unwrap();
        let img = generate_external(&req, &endpoint).unwrap();
        assert!((img.data()[0] - 0.25).abs() < 1e-6);
        assert!((img.data()[31] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn unreachable_endpoint_is_transport_error() {
        let req = GenRequest::new("x", 1).unwrap();
        let err = generate_external(&req, "http://127.0.0.1:1");
        match err {
            Err(Error::Transport { request_id, .. }) => {
                assert_eq!(request_id, req.request_id());
            }
            other => panic!("expected transport error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_payload_is_transport_error() {
        let (endpoint, _server) = serve_once("{\"nope\":1}".to_string());
        let req = GenRequest::new("x", 1).unwrap();
        assert!(matches!(
            generate_external(&req, &endpoint),
            Err(Error::Transport { .. })
        ));
        // wrong byte count
        let (b64, _) = fixture_pixels(4, 4);
        let body = format!("{{\"width\":8,\"height\":8,\"pixels\":\"{b64}\"}}");
        let (endpoint, _server) = serve_once(body);
        assert!(matches!(
            generate_external(&req, &endpoint),
            Err(Error::Transport { .. })
        ));
    }

    #[test]
    fn invalid_request_options_rejected() {
        assert!(GenRequest::with_options("x", 1, 0.0, 20).is_err());
        assert!(GenRequest::with_options("x", 1, 3.5, 0).is_err());
    }
}
