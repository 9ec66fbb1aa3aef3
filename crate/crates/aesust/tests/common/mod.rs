#![allow(dead_code)]

use std::path::Path;

use aesust::imageio;
use aesust::synth;
use aesust_core::controls::Mask;
use aesust_core::{AesUst, ChannelScale};

pub const BOUNDARY: &str = "aesust-test-boundary";

/// Multipart body from `(field, bytes)` pairs.
pub fn multipart(fields: &[(&str, Vec<u8>)]) -> Vec<u8> {
    let mut body = Vec::new();
    for (name, bytes) in fields {
        body.extend_from_slice(format!("--{BOUNDARY}\r\n").as_bytes());
        body.extend_from_slice(format!("Content-Disposition: form-data; name=\"{name}\"; filename=\"{name}\"\r\n").as_bytes());
        body.extend_from_slice(b"Content-Type: application/octet-stream\r\n\r\n");
        body.extend_from_slice(bytes);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    body
}

pub fn content_type() -> String {
    format!("multipart/form-data; boundary={BOUNDARY}")
}

/// Untrained model whose decoder weights are amplified: a freshly
/// initialized decoder maps almost every feature to one flat image, which
/// would make different requests quantize to the same PNG.
pub fn model(stage2: bool) -> AesUst<f32> {
    let mut m = AesUst::<f32>::new(ChannelScale(0.125), 21);
    let ids: Vec<_> = m.decoder.params.ids().collect();
    for id in ids {
        if m.decoder.params.name(id).ends_with("weight") {
            for v in m.decoder.params.get_mut(id).data_mut() {
                *v *= 2.5;
            }
        }
    }
    if stage2 {
        m.stage = aesust_core::losses::Stage::Finetune;
    }
    m
}

pub fn write_checkpoint(dir: &Path, model: &AesUst<f32>) -> std::path::PathBuf {
    let p = dir.join("model.aesu");
    aesust::persist::write_archive(&p, &model.to_entries(0)).unwrap();
    p
}

pub fn content_png(size: u32) -> Vec<u8> {
    imageio::encode_image(&imageio::rgb_to_tensor(&synth::content_image(5, size)))
}

pub fn style_png(seed: u64, size: u32) -> Vec<u8> {
    imageio::encode_image(&imageio::rgb_to_tensor(&synth::style_image(seed, size)))
}

/// Left half / right half masks.
pub fn halves(size: usize) -> (Vec<u8>, Vec<u8>) {
    let left = Mask::from_fn(size, size, |_, x| x < size / 2);
    let right = Mask::from_fn(size, size, |_, x| x >= size / 2);
    (imageio::encode_mask(&left), imageio::encode_mask(&right))
}
