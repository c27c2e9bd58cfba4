use std::fs;
use std::path::Path;

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use super::Camera;
use crate::error::{Error, Result};

/// A camera together with the id of the view it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRecord {
    pub id: u32,
    pub camera: Camera,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraJson {
    id: u32,
    width: u32,
    height: u32,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    /// Row-major 4x4.
    world_to_camera: [f64; 16],
}

/// Reads a JSON array of camera records, returned sorted by id.
pub fn load_cameras(path: impl AsRef<Path>) -> Result<Vec<CameraRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_cameras(&text).map_err(|e| match e {
        ParseError::Json(source) => Error::CameraJson {
            path: path.to_path_buf(),
            source,
        },
        ParseError::Invalid(err) => err,
    })
}

enum ParseError {
    Json(serde_json::Error),
    Invalid(Error),
}

fn parse_cameras(text: &str) -> std::result::Result<Vec<CameraRecord>, ParseError> {
    let raw: Vec<CameraJson> = serde_json::from_str(text).map_err(ParseError::Json)?;
    let mut records = raw
        .into_iter()
        .map(|r| {
            let camera = Camera {
                fx: r.fx,
                fy: r.fy,
                cx: r.cx,
                cy: r.cy,
                width: r.width,
                height: r.height,
                world_to_camera: Matrix4::from_row_slice(&r.world_to_camera),
            };
            camera
                .validate()
                .map_err(|reason| ParseError::Invalid(Error::InvalidCamera { id: r.id, reason }))?;
            Ok(CameraRecord { id: r.id, camera })
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    records.sort_by_key(|r| r.id);
    if let Some(w) = records.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(ParseError::Invalid(Error::InvalidCamera {
            id: w[0].id,
            reason: "duplicate camera id".into(),
        }));
    }
    Ok(records)
}

pub fn save_cameras(records: &[CameraRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw: Vec<CameraJson> = records
        .iter()
        .map(|r| {
            let m = &r.camera.world_to_camera;
            let mut w2c = [0.0; 16];
            for row in 0..4 {
                for col in 0..4 {
                    w2c[row * 4 + col] = m[(row, col)];
                }
            }
            CameraJson {
                id: r.id,
                width: r.camera.width,
                height: r.camera.height,
                fx: r.camera.fx,
                fy: r.camera.fy,
                cx: r.camera.cx,
                cy: r.camera.cy,
                world_to_camera: w2c,
            }
        })
        .collect();
    let text = serde_json::to_string_pretty(&raw).expect("camera records always serialize");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
