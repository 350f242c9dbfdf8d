//! Pre-assigned accounts with salted password hashes.

use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use adventure_core::events::Mode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Learner,
    Admin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Account {
    pub learner_id: String,
    pub username: String,
    pub salt: String,
    pub password_hash: String,
    pub role: Role,
    /// Experimental group; fixed at creation. Admins have none.
    pub mode: Option<Mode>,
    pub locale: String,
}

#[derive(Debug, Error)]
pub enum AccountError {
    #[error("accounts file {path}: {message}")]
    File { path: PathBuf, message: String },
    #[error("username {0:?} already exists")]
    Duplicate(String),
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("invalid account: {0}")]
    Invalid(String),
}

pub fn hash_password(salt: &str, password: &str) -> String {
    let mut h = Sha256::new();
    h.update(salt.as_bytes());
    h.update(b":");
    h.update(password.as_bytes());
    hex::encode(h.finalize())
}

/// Request to create one account.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewAccount {
    pub username: String,
    pub password: String,
    pub role: Role,
    pub mode: Option<Mode>,
    pub locale: String,
}

#[derive(Debug, Deserialize)]
struct RosterRow {
    username: String,
    password: String,
    #[serde(default)]
    mode: String,
    #[serde(default)]
    locale: String,
    #[serde(default)]
    role: String,
}

impl RosterRow {
    fn into_new(self) -> Result<NewAccount, String> {
        let role = match self.role.trim() {
            "" | "learner" => Role::Learner,
            "admin" => Role::Admin,
            other => return Err(format!("unknown role {other:?}")),
        };
        let mode = match self.mode.trim() {
            "" => None,
            m => Some(
                m.parse::<Mode>()
                    .map_err(|_| format!("unknown mode {m:?}"))?,
            ),
        };
        let locale = match self.locale.trim() {
            "" => "en".to_string(),
            l => l.to_string(),
        };
        Ok(NewAccount {
            username: self.username.trim().to_string(),
            password: self.password,
            role,
            mode,
            locale,
        })
    }
}

/// All accounts, persisted as one JSON document.
#[derive(Debug, Clone, Default)]
pub struct AccountStore {
    path: Option<PathBuf>,
    accounts: Vec<Account>,
}

impl AccountStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// A missing file is an empty store.
    pub fn load(path: &Path) -> Result<Self, AccountError> {
        let file_err = |message: String| AccountError::File {
            path: path.to_path_buf(),
            message,
        };
        let accounts: Vec<Account> = match std::fs::read_to_string(path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| file_err(e.to_string()))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(file_err(e.to_string())),
        };
        let mut store = Self {
            path: Some(path.to_path_buf()),
            accounts: Vec::new(),
        };
        for a in accounts {
            if store.find(&a.username).is_some() {
                return Err(file_err(format!("duplicate username {:?}", a.username)));
            }
            store.accounts.push(a);
        }
        Ok(store)
    }

    /// Writes atomically via a sibling temporary file.
    pub fn save(&self) -> Result<(), AccountError> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let err = |e: std::io::Error| AccountError::File {
            path: path.clone(),
            message: e.to_string(),
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(err)?;
        }
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string_pretty(&self.accounts).expect("accounts serialize");
        std::fs::write(&tmp, text).map_err(err)?;
        std::fs::rename(&tmp, path).map_err(err)
    }

    pub fn accounts(&self) -> &[Account] {
        &self.accounts
    }

    pub fn find(&self, username: &str) -> Option<&Account> {
        self.accounts.iter().find(|a| a.username == username)
    }

    pub fn verify(&self, username: &str, password: &str) -> Option<&Account> {
        self.find(username)
            .filter(|a| hash_password(&a.salt, password) == a.password_hash)
    }

    fn check(&self, new: &NewAccount) -> Result<(), AccountError> {
        if new.username.is_empty() {
            return Err(AccountError::Invalid("username must not be empty".into()));
        }
        if new.password.is_empty() {
            return Err(AccountError::Invalid(format!(
                "{}: password must not be empty",
                new.username
            )));
        }
        match (new.role, new.mode) {
            (Role::Learner, None) => {
                return Err(AccountError::Invalid(format!(
                    "{}: learners need a mode",
                    new.username
                )))
            }
            (Role::Admin, Some(_)) => {
                return Err(AccountError::Invalid(format!(
                    "{}: admins have no mode",
                    new.username
                )))
            }
            _ => {}
        }
        if self.find(&new.username).is_some() {
            return Err(AccountError::Duplicate(new.username.clone()));
        }
        Ok(())
    }

    pub fn add(&mut self, new: NewAccount) -> Result<&Account, AccountError> {
        self.check(&new)?;
        let salt = uuid::Uuid::new_v4().simple().to_string();
        self.accounts.push(Account {
            learner_id: new.username.clone(),
            password_hash: hash_password(&salt, &new.password),
            salt,
            username: new.username,
            role: new.role,
            mode: new.mode,
            locale: new.locale,
        });
        Ok(self.accounts.last().expect("just pushed"))
    }

    /// Imports a roster with columns `username,password,mode[,locale][,role]`.
    /// Either every row is added or none is.
    pub fn import_csv(&mut self, reader: impl Read) -> Result<Vec<Account>, AccountError> {
        let mut staged = self.clone();
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::Headers)
            .from_reader(reader);
        let mut added = Vec::new();
        for (i, row) in rdr.deserialize::<RosterRow>().enumerate() {
            let row_no = i + 2;
            let row_err = |message: String| AccountError::Row {
                row: row_no,
                message,
            };
            let new = row
                .map_err(|e| row_err(e.to_string()))?
                .into_new()
                .map_err(row_err)?;
            let account = staged.add(new).map_err(|e| row_err(e.to_string()))?;
            added.push(account.clone());
        }
        *self = staged;
        Ok(added)
    }
}
