//! Editor and describer backed by an external process reachable on a local
//! TCP socket. Each request is one JSON object per line; each response is one
//! JSON object per line. Images travel as PNG paths in a shared directory.
//!
//! Editor: `{"image_path", "positive", "negative", "seed"}` -> `{"image_path"}`.
//! Describer: `{"image_path", "instruction", "seed"}` -> `{"text"}`.
//! Either response may instead carry `{"error": "..."}`.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Describer, EditRequest, Edited, Editor};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Serialize)]
struct EditMessage<'a> {
    image_path: &'a Path,
    positive: &'a str,
    negative: &'a str,
    seed: u64,
}

#[derive(Serialize)]
struct DescribeMessage<'a> {
    image_path: &'a Path,
    instruction: &'a str,
    seed: u64,
}

#[derive(Deserialize)]
struct Reply {
    image_path: Option<PathBuf>,
    text: Option<String>,
    error: Option<String>,
}

/// Connection settings shared by both clients.
#[derive(Clone, Debug)]
pub struct ServiceClient {
    pub addr: String,
    /// Directory for request images; must be readable by the service.
    pub work_dir: PathBuf,
    pub timeout: Duration,
    counter: u64,
}

impl ServiceClient {
    pub fn new(addr: impl Into<String>, work_dir: impl Into<PathBuf>) -> Self {
        Self { addr: addr.into(), work_dir: work_dir.into(), timeout: Duration::from_secs(120), counter: 0 }
    }

    fn call<T: Serialize>(&self, message: &T) -> Result<Reply> {
        let err = |what: &str, e: std::io::Error| Error::Service(format!("{what} {}: {e}", self.addr));
        let stream = TcpStream::connect(&self.addr).map_err(|e| err("cannot connect to", e))?;
        stream.set_read_timeout(Some(self.timeout)).map_err(|e| err("socket setup for", e))?;
        let mut line = serde_json::to_string(message).map_err(|e| Error::Service(e.to_string()))?;
        line.push('\n');
        (&stream).write_all(line.as_bytes()).map_err(|e| err("write to", e))?;
        let mut reply = String::new();
        BufReader::new(&stream).read_line(&mut reply).map_err(|e| err("read from", e))?;
        if reply.trim().is_empty() {
            return Err(Error::Service(format!("{} closed the connection without a reply", self.addr)));
        }
        let parsed: Reply =
            serde_json::from_str(reply.trim()).map_err(|e| Error::Service(format!("bad reply {reply:?}: {e}")))?;
        if let Some(e) = parsed.error {
            return Err(Error::Service(format!("{} reported: {e}", self.addr)));
        }
        Ok(parsed)
    }

    fn stage_image(&mut self, image: &Image, tag: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.work_dir).map_err(|e| Error::io(&self.work_dir, e))?;
        self.counter += 1;
        let path = self.work_dir.join(format!("{tag}_{}.png", self.counter));
        image.save_png(&path)?;
        Ok(path)
    }
}

pub struct ServiceEditor(pub ServiceClient);

impl Editor for ServiceEditor {
    fn edit(&mut self, request: &EditRequest<'_>) -> Result<Edited> {
        let path = self.0.stage_image(request.image, "edit")?;
        let reply = self.0.call(&EditMessage {
            image_path: &path,
            positive: &request.prompts.positive,
            negative: &request.prompts.negative,
            seed: request.seed,
        })?;
        let out = reply.image_path.ok_or_else(|| Error::Service("editor reply has no image_path".into()))?;
        Ok(Edited { image: Image::load_png(&out)?, person: None, flags: Vec::new() })
    }
}

pub struct ServiceDescriber(pub ServiceClient);

impl Describer for ServiceDescriber {
    fn describe(&mut self, image: &Image, instruction: &str, seed: u64) -> Result<String> {
        let path = self.0.stage_image(image, "describe")?;
        let reply = self.0.call(&DescribeMessage { image_path: &path, instruction, seed })?;
        reply.text.ok_or_else(|| Error::Service("describer reply has no text".into()))
    }
}
