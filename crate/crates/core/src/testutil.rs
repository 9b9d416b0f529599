//! Helpers shared by unit tests.

use std::sync::Arc;

use crate::backend::{BackendConfig, ModelClient, RoleTag, ScriptedBackend};
use crate::model::{ImageProfile, ImageRef, ImageStore};

/// A temp directory holding `n` distinct small files registered as images.
pub fn fixture_store(n: usize) -> (ImageStore, Vec<ImageRef>, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    for i in 0..n {
        std::fs::write(dir.path().join(format!("img{i}.png")), format!("image bytes {i}")).unwrap();
    }
    let store = ImageStore::new(dir.path());
    let images = store.ingest_all().unwrap();
    (store, images, dir)
}

pub fn scripted_client(playlists: Vec<(RoleTag, Vec<String>)>) -> (ModelClient, Arc<ScriptedBackend>) {
    let backend = Arc::new(ScriptedBackend::new(playlists));
    let client = ModelClient::with_backend(backend.clone(), BackendConfig::scripted()).unwrap();
    (client, backend)
}

pub fn profile_for(image: &ImageRef, view: &str) -> ImageProfile {
    ImageProfile {
        image: image.clone(),
        overall_view: view.to_string(),
        background: String::new(),
        objects: vec![],
        interactions: String::new(),
        text_content: String::new(),
        atmosphere: String::new(),
        narrative: format!("{view} narrative"),
    }
}
