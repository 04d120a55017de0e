#include "lift3d/lift3d.h"

#include <cstdlib>
#include <cstring>
#include <string>

#include "lift3d/config.hpp"
#include "lift3d/runner.hpp"

struct l3d_session {
  lift3d::Config config;
  std::string last_error;
  l3d_log_fn log_fn = nullptr;
  void* log_user = nullptr;

  lift3d::LogLineFn logger() const {
    if (!log_fn) return nullptr;
    l3d_log_fn fn = log_fn;
    void* user = log_user;
    return [fn, user](const std::string& line) { fn(line.c_str(), user); };
  }
};

namespace {

template <typename Fn>
l3d_status wrap(l3d_session* session, Fn&& fn) {
  if (!session) return L3D_ERR_INVALID;
  session->last_error.clear();
  try {
    fn();
    return L3D_OK;
  } catch (const lift3d::ConfigError& e) {
    session->last_error = e.what();
    return L3D_ERR_INVALID;
  } catch (const std::exception& e) {
    session->last_error = e.what();
    return L3D_ERR_RUNTIME;
  }
}

}  // namespace

extern "C" {

l3d_session* l3d_session_new(void) {
  try {
    return new l3d_session();
  } catch (...) {
    return nullptr;
  }
}

void l3d_session_free(l3d_session* session) { delete session; }

const char* l3d_last_error(const l3d_session* session) {
  return session ? session->last_error.c_str() : "null session";
}

void l3d_set_logger(l3d_session* session, l3d_log_fn fn, void* user) {
  if (!session) return;
  session->log_fn = fn;
  session->log_user = user;
}

l3d_status l3d_config_load(l3d_session* session, const char* path) {
  return wrap(session, [&] {
    if (!path) throw lift3d::ConfigError("null config path");
    session->config.load_file(path);
  });
}

l3d_status l3d_config_set(l3d_session* session, const char* key_eq_value) {
  return wrap(session, [&] {
    if (!key_eq_value) throw lift3d::ConfigError("null override");
    session->config.apply_override(key_eq_value);
  });
}

l3d_status l3d_config_validate(l3d_session* session) {
  return wrap(session, [&] { session->config.validate(); });
}

char* l3d_config_render(const l3d_session* session) {
  if (!session) return nullptr;
  const std::string text = session->config.render();
  char* out = static_cast<char*>(std::malloc(text.size() + 1));
  if (!out) return nullptr;
  std::memcpy(out, text.c_str(), text.size() + 1);
  return out;
}

void l3d_string_free(char* text) { std::free(text); }

l3d_status l3d_run_synth(l3d_session* session) {
  return wrap(session, [&] {
    session->config.validate();
    lift3d::run_synth(session->config, session->logger());
  });
}

l3d_status l3d_run_coarse(l3d_session* session) {
  return wrap(session, [&] {
    session->config.validate();
    lift3d::run_coarse(session->config, session->logger());
  });
}

l3d_status l3d_run_fine(l3d_session* session) {
  return wrap(session, [&] {
    session->config.validate();
    lift3d::run_fine(session->config, session->logger());
  });
}

l3d_status l3d_run_render(l3d_session* session) {
  return wrap(session, [&] {
    session->config.validate();
    lift3d::run_render(session->config, session->logger());
  });
}

l3d_status l3d_run_eval(l3d_session* session) {
  return wrap(session, [&] {
    session->config.validate();
    lift3d::run_eval(session->config, session->logger());
  });
}

l3d_status l3d_run_gradcheck(l3d_session* session, int* n_failed) {
  return wrap(session, [&] {
    session->config.validate();
    const int failed = lift3d::run_gradcheck_command(session->config, session->logger());
    if (n_failed) *n_failed = failed;
  });
}

}  // extern "C"
