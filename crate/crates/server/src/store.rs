//! On-disk layout: `<root>/datasets/<name>/{schema.json,data.csv}` and
//! `<root>/sessions/<id>.json`.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use dpexplore::schema::{load_dataset, Dataset, Schema};
use dpexplore::session::Session;

use crate::error::AppError;

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

fn check_name(name: &str) -> Result<(), AppError> {
    let ok = !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if ok {
        Ok(())
    } else {
        Err(AppError::validation(format!("invalid name `{name}`: use letters, digits, `_` and `-`")))
    }
}

impl Store {
    /// Opens a store, creating its directories if needed.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, AppError> {
        let root = root.into();
        fs::create_dir_all(root.join("datasets"))?;
        fs::create_dir_all(root.join("sessions"))?;
        Ok(Self { root })
    }

    /// Store holding a session file, assuming the standard layout.
    pub fn of_session_file(path: &Path) -> Result<Self, AppError> {
        let root = path
            .parent()
            .and_then(Path::parent)
            .ok_or_else(|| AppError::io(format!("{} is not inside a store", path.display())))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dataset_dir(&self, name: &str) -> PathBuf {
        self.root.join("datasets").join(name)
    }

    /// Validates a CSV table against a schema file and copies both into the store.
    pub fn ingest(&self, name: &str, table: &Path, schema: &Path) -> Result<Dataset, AppError> {
        check_name(name)?;
        let dataset = load_dataset(table, schema)?;
        let dir = self.dataset_dir(name);
        fs::create_dir_all(&dir)?;
        let schema_json = serde_json::to_vec_pretty(dataset.schema()).expect("schema serializes");
        fs::write(dir.join("schema.json"), schema_json)?;
        dataset.write_csv(File::create(dir.join("data.csv"))?).map_err(|e| AppError::io(e.to_string()))?;
        Ok(dataset)
    }

    pub fn dataset(&self, name: &str) -> Result<Dataset, AppError> {
        check_name(name)?;
        let dir = self.dataset_dir(name);
        if !dir.is_dir() {
            return Err(AppError::not_found(format!("no dataset `{name}`")));
        }
        Ok(load_dataset(&dir.join("data.csv"), &dir.join("schema.json"))?)
    }

    pub fn schema(&self, name: &str) -> Result<Schema, AppError> {
        check_name(name)?;
        let path = self.dataset_dir(name).join("schema.json");
        if !path.is_file() {
            return Err(AppError::not_found(format!("no dataset `{name}`")));
        }
        Ok(Schema::from_json_file(&path)?)
    }

    pub fn datasets(&self) -> Result<Vec<String>, AppError> {
        let mut names: Vec<String> = fs::read_dir(self.root.join("datasets"))?
            .filter_map(Result::ok)
            .filter(|e| e.path().join("schema.json").is_file())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        names.sort();
        Ok(names)
    }

    pub fn session_path(&self, id: &str) -> Result<PathBuf, AppError> {
        check_name(id)?;
        Ok(self.root.join("sessions").join(format!("{id}.json")))
    }

    pub fn save_session(&self, session: &Session) -> Result<(), AppError> {
        Ok(session.save(&self.session_path(&session.id)?)?)
    }

    /// `None` when no snapshot exists for `id`.
    pub fn load_session(&self, id: &str) -> Result<Option<Session>, AppError> {
        let path = self.session_path(id)?;
        if !path.is_file() {
            return Ok(None);
        }
        Ok(Some(Session::load(&path)?))
    }
}
