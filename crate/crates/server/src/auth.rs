//! Static bearer tokens and the role/endpoint authorization matrix.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Viewer,
    Controller,
    Admin,
}

pub const ROLES: [Role; 3] = [Role::Viewer, Role::Controller, Role::Admin];

#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserConfig {
    pub id: String,
    pub name: String,
    pub role: Role,
    pub token: String,
}

impl fmt::Debug for UserConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("UserConfig")
            .field("id", &self.id)
            .field("name", &self.name)
            .field("role", &self.role)
            .field("token", &"<redacted>")
            .finish()
    }
}

/// A user as the API shows it: never with the token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct User {
    pub id: String,
    pub name: String,
    pub role: Role,
}

pub struct Users {
    by_token: HashMap<String, User>,
}

impl Users {
    pub fn new(users: Vec<UserConfig>) -> anyhow::Result<Users> {
        let mut by_token = HashMap::new();
        let mut ids = std::collections::HashSet::new();
        for u in users {
            if u.token.is_empty() {
                anyhow::bail!("user {} has an empty token", u.id);
            }
            if !ids.insert(u.id.clone()) {
                anyhow::bail!("duplicate user id {}", u.id);
            }
            let user = User {
                id: u.id.clone(),
                name: u.name,
                role: u.role,
            };
            if by_token.insert(u.token, user).is_some() {
                anyhow::bail!("two users share a token");
            }
        }
        Ok(Users { by_token })
    }

    pub fn authenticate(&self, token: &str) -> Option<&User> {
        self.by_token.get(token)
    }
}

/// Every authenticated endpoint. `/healthz`, `/api/meta` and `/ui/` are public.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Endpoint {
    Me,
    ListSensors,
    RegisterSensor,
    GetReadings,
    ListDownlinks,
    EnqueueDownlink,
    GetForecast,
    ListRules,
    CreateRule,
    UpdateRule,
    DeleteRule,
    ListNotifications,
    ListModels,
    TrainModel,
}

/// Allowed roles per endpoint, as `[viewer, controller, admin]`. Rule
/// mutation is further limited to the rule's owner unless the caller is an
/// admin.
pub const MATRIX: [(Endpoint, [bool; 3]); 14] = [
    (Endpoint::Me, [true, true, true]),
    (Endpoint::ListSensors, [true, true, true]),
    (Endpoint::RegisterSensor, [false, false, true]),
    (Endpoint::GetReadings, [true, true, true]),
    (Endpoint::ListDownlinks, [true, true, true]),
    (Endpoint::EnqueueDownlink, [false, true, true]),
    (Endpoint::GetForecast, [true, true, true]),
    (Endpoint::ListRules, [true, true, true]),
    (Endpoint::CreateRule, [true, true, true]),
    (Endpoint::UpdateRule, [true, true, true]),
    (Endpoint::DeleteRule, [true, true, true]),
    (Endpoint::ListNotifications, [true, true, true]),
    (Endpoint::ListModels, [true, true, true]),
    (Endpoint::TrainModel, [false, false, true]),
];

pub fn allowed(endpoint: Endpoint, role: Role) -> bool {
    let (_, row) = MATRIX.iter().find(|(e, _)| *e == endpoint).expect("every endpoint has a matrix row");
    row[role as usize]
}
