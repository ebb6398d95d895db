use std::path::Path;

use anyhow::{bail, Context, Result};
use streampref::modelio::{Client, ModelEndpoint, Role};

use crate::manifest::Recorder;

/// Loads an endpoint from a TOML file, or builds one from a bare
/// `mock:` / `http(s)://` URL with default limits.
pub fn load(target: &str, role: Role) -> Result<ModelEndpoint> {
    let path = Path::new(target);
    if path.is_file() {
        let mut e = ModelEndpoint::load(path).with_context(|| format!("endpoint {target}"))?;
        if e.role != role {
            log::warn!("endpoint {target} declares role {:?}, used as {role:?}", e.role);
            e.role = role;
        }
        return Ok(e);
    }
    if target.starts_with("mock:") || target.starts_with("http://") || target.starts_with("https://") {
        let e = ModelEndpoint::new(target, "default", role);
        e.validate()?;
        return Ok(e);
    }
    bail!("endpoint {target:?} is neither a config file nor a URL")
}

pub fn connect(target: &str, role: Role, rec: &mut Recorder) -> Result<Client> {
    let e = load(target, role)?;
    rec.input(Path::new(target))?;
    rec.config(&format!("endpoint:{role:?}"), &e)?;
    // files a scripted backend reads are inputs too
    if let Some((_, query)) = e.base_url.strip_prefix("mock:").and_then(|r| r.split_once('?')) {
        for (k, v) in streampref::modelio::parse_query(query)? {
            if k == "truth" || k == "histories" {
                rec.input(Path::new(&v))?;
            }
        }
    }
    Ok(Client::connect(e)?)
}
