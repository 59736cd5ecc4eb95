use std::path::Path;

use image::{DynamicImage, ImageFormat};

use super::scene::ScenePair;
use super::{io_err, DataError};

const FILES: [&str; 3] = ["pre.png", "post.png", "labels.png"];

fn open(scene: &str, dir: &Path, file: &'static str) -> Result<DynamicImage, DataError> {
    let path = dir.join(file);
    if !path.is_file() {
        return Err(DataError::MissingFile {
            scene: scene.to_string(),
            file,
        });
    }
    image::open(&path).map_err(|source| DataError::Image { path, source })
}

fn format_err(scene: &str, file: &'static str, img: &DynamicImage) -> DataError {
    DataError::PixelFormat {
        scene: scene.to_string(),
        file,
        format: format!("{:?}", img.color()),
    }
}

/// Reads `pre.png`, `post.png` and `labels.png` from `dir`.
pub fn load_scene(dir: &Path) -> Result<ScenePair, DataError> {
    let scene_id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let rgb = |file: &'static str| match open(&scene_id, dir, file)? {
        DynamicImage::ImageRgb8(img) => Ok(img),
        other => Err(format_err(&scene_id, file, &other)),
    };
    let pre = rgb(FILES[0])?;
    let post = rgb(FILES[1])?;
    let labels = match open(&scene_id, dir, FILES[2])? {
        DynamicImage::ImageLuma8(img) => img,
        other => return Err(format_err(&scene_id, FILES[2], &other)),
    };
    let pair = ScenePair {
        scene_id,
        pre,
        post,
        labels,
    };
    pair.validate()?;
    Ok(pair)
}

/// Loads every `<root>/<scene_id>/` directory, sorted by id. Directories
/// holding none of the three scene files are skipped.
pub fn load_dataset(root: &Path) -> Result<Vec<ScenePair>, DataError> {
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(root).map_err(io_err(root))? {
        let entry = entry.map_err(io_err(root))?;
        let path = entry.path();
        if path.is_dir() && FILES.iter().any(|f| path.join(f).exists()) {
            dirs.push(path);
        }
    }
    dirs.sort();
    dirs.iter().map(|d| load_scene(d)).collect()
}

pub fn write_scene(root: &Path, scene: &ScenePair) -> Result<(), DataError> {
    scene.validate()?;
    let dir = root.join(&scene.scene_id);
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let save = |file: &str, img: DynamicImage| {
        let path = dir.join(file);
        img.save_with_format(&path, ImageFormat::Png)
            .map_err(|source| DataError::Image { path, source })
    };
    save(FILES[0], DynamicImage::ImageRgb8(scene.pre.clone()))?;
    save(FILES[1], DynamicImage::ImageRgb8(scene.post.clone()))?;
    save(FILES[2], DynamicImage::ImageLuma8(scene.labels.clone()))
}

pub fn write_dataset(root: &Path, scenes: &[ScenePair]) -> Result<(), DataError> {
    std::fs::create_dir_all(root).map_err(io_err(root))?;
    scenes.iter().try_for_each(|s| write_scene(root, s))
}
