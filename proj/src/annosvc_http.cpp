#include "altogether/annosvc_http.hpp"

#include <thread>

#include <fmt/format.h>
#include <httplib.h>
#include <spdlog/spdlog.h>

namespace altogether::annosvc {

int http_status(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kNotFound:
      return 404;
    case ErrorKind::kState:
    case ErrorKind::kConflict:
    case ErrorKind::kPrecondition:
    case ErrorKind::kSequencing:
      return 409;
    case ErrorKind::kParse:
    case ErrorKind::kIngestion:
    case ErrorKind::kValidation:
    case ErrorKind::kFormat:
    case ErrorKind::kLength:
    case ErrorKind::kDomain:
    case ErrorKind::kShape:
    case ErrorKind::kRange:
    case ErrorKind::kEmptyRound:
      return 400;
    default:
      return 500;
  }
}

namespace {

void send_json(httplib::Response& res, int status, const io::Json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json; charset=utf-8");
}

void send_error(httplib::Response& res, int status, std::string_view code, std::string_view detail,
                const std::vector<std::string>* violations = nullptr) {
  io::Json err{{"code", code}, {"detail", detail}};
  if (violations) err["violations"] = *violations;
  send_json(res, status, {{"error", std::move(err)}});
}

io::Json parse_body(const httplib::Request& req) {
  io::Json body;
  try {
    body = io::Json::parse(req.body);
  } catch (const io::Json::exception& e) {
    throw Error(ErrorKind::kParse, fmt::format("request body is not valid JSON: {}", e.what()));
  }
  if (!body.is_object()) throw Error(ErrorKind::kParse, "request body must be a JSON object");
  return body;
}

std::vector<std::string> string_list(const io::Json& body, std::string_view key) {
  auto it = body.find(key);
  if (it == body.end() || !it->is_array()) {
    throw Error(ErrorKind::kValidation, fmt::format("field '{}' must be an array of strings", key));
  }
  std::vector<std::string> out;
  for (const auto& v : *it) {
    if (!v.is_string()) throw Error(ErrorKind::kValidation, fmt::format("field '{}' must be an array of strings", key));
    out.push_back(v.get<std::string>());
  }
  return out;
}

using Handler = std::function<void(const httplib::Request&, httplib::Response&)>;

// Maps library errors onto the JSON error envelope.
Handler guarded(Handler h) {
  return [h = std::move(h)](const httplib::Request& req, httplib::Response& res) {
    try {
      h(req, res);
    } catch (const SubmissionRejected& e) {
      send_error(res, 400, e.code(), e.what(), &e.violations());
    } catch (const Error& e) {
      send_error(res, http_status(e.kind()), e.code(), e.what());
    } catch (const io::Json::exception& e) {
      send_error(res, 400, "validation_error", e.what());
    } catch (const std::exception& e) {
      spdlog::error("{} {}: {}", req.method, req.path, e.what());
      send_error(res, 500, "internal_error", e.what());
    }
  };
}

}  // namespace

struct HttpServer::Impl {
  Service& svc;
  httplib::Server server;
  std::thread thread;

  explicit Impl(Service& s) : svc(s) { routes(); }

  void routes() {
    server.Get("/health", guarded([](const httplib::Request&, httplib::Response& res) {
      send_json(res, 200, {{"status", "ok"}});
    }));

    server.Post("/projects", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto body = parse_body(req);
      const auto name = io::require_string(body, "name");
      const auto vendors = string_list(body, "vendors");
      Project p;
      if (auto items = body.find("items"); items != body.end()) {
        if (!items->is_array()) throw Error(ErrorKind::kValidation, "field 'items' must be an array");
        std::vector<corpus::ImageItem> parsed;
        std::size_t i = 0;
        for (const auto& j : *items) {
          try {
            parsed.push_back(corpus::item_from_json(j));
          } catch (const Error& e) {
            throw Error(ErrorKind::kIngestion, fmt::format("items[{}]: {}", i, e.what()));
          }
          ++i;
        }
        p = svc.create_project(name, std::move(parsed), vendors);
      } else if (body.contains("items_path")) {
        const std::filesystem::path path = io::require_string(body, "items_path");
        try {
          p = svc.create_project(name, path, vendors);
        } catch (const Error& e) {
          if (e.kind() != ErrorKind::kIo) throw;
          throw Error(ErrorKind::kIngestion, e.what());
        }
      } else {
        throw Error(ErrorKind::kValidation, "one of 'items' or 'items_path' is required");
      }
      send_json(res, 201, to_json(p));
    }));

    server.Get(R"(/projects/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      send_json(res, 200, to_json(svc.project(req.matches[1])));
    }));

    server.Post(R"(/projects/([^/]+)/rounds)", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto body = parse_body(req);
      const int round = static_cast<int>(io::require_int(body, "round"));
      io::Json list = io::Json::array();
      for (const auto& a : svc.open_round(req.matches[1], round)) list.push_back(to_json(a));
      send_json(res, 201, {{"round_no", round}, {"assignments", std::move(list)}});
    }));

    server.Get(R"(/projects/([^/]+)/tasks/next)", guarded([this](const httplib::Request& req, httplib::Response& res) {
      if (!req.has_param("annotator")) throw Error(ErrorKind::kValidation, "query parameter 'annotator' is required");
      const auto task = svc.next_task(req.matches[1], req.get_param_value("annotator"));
      if (!task) {
        send_json(res, 200, {{"status", "empty"}, {"task", nullptr}});
        return;
      }
      send_json(res, 200, {{"status", "ok"}, {"task", to_json(*task)}});
    }));

    server.Post(R"(/assignments/([^/]+)/submit)", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto body = parse_body(req);
      Submission sub;
      sub.caption = io::require_string(body, "caption");
      sub.annotator = io::require_string(body, "annotator");
      auto cl = body.find("checklist");
      if (cl == body.end() || !cl->is_object()) {
        throw Error(ErrorKind::kValidation, "field 'checklist' must be an object of booleans");
      }
      for (const auto& [k, v] : cl->items()) {
        if (!v.is_boolean()) throw Error(ErrorKind::kValidation, fmt::format("checklist '{}' must be a boolean", k));
        sub.checklist[k] = v.get<bool>();
      }
      send_json(res, 201, to_json(svc.submit(req.matches[1], sub)));
    }));

    server.Get(R"(/projects/([^/]+)/stats)", guarded([this](const httplib::Request& req, httplib::Response& res) {
      io::Json rounds = io::Json::array();
      for (const auto& s : svc.stats(req.matches[1])) rounds.push_back(to_json(s));
      send_json(res, 200, {{"project_id", std::string(req.matches[1])}, {"rounds", std::move(rounds)}});
    }));

    server.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
      if (!res.body.empty()) return;
      if (res.status == 404) {
        send_error(res, 404, "not_found", fmt::format("no route for {} {}", req.method, req.path));
      } else {
        send_error(res, res.status, "http_error", fmt::format("HTTP {}", res.status));
      }
    });
  }
};

HttpServer::HttpServer(Service& service) : impl_(std::make_unique<Impl>(service)) {}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  const int bound = port == 0 ? impl_->server.bind_to_any_port(host) : (impl_->server.bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw Error(ErrorKind::kIo, fmt::format("cannot bind {}:{}", host, port));
  return bound;
}

void HttpServer::serve() { impl_->server.listen_after_bind(); }

void HttpServer::start() {
  impl_->thread = std::thread([this] { serve(); });
  impl_->server.wait_until_ready();
}

void HttpServer::stop() {
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace altogether::annosvc
