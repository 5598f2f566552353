#pragma once

#include <memory>
#include <string>

#include "altogether/annosvc.hpp"

namespace altogether::annosvc {

// HTTP status for a library error kind: 400 for bad input, 404 for unknown
// resources, 409 for state conflicts, 500 otherwise.
int http_status(ErrorKind kind);

// JSON front end over a Service:
//   GET  /health
//   POST /projects                         {"name", "vendors", "items" | "items_path"}
//   GET  /projects/{id}
//   POST /projects/{id}/rounds             {"round"}
//   GET  /projects/{id}/tasks/next?annotator=
//   POST /assignments/{id}/submit          {"caption", "checklist", "annotator"}
//   GET  /projects/{id}/stats
// Errors are {"error": {"code", "detail"}} (plus "violations" for rejected
// submissions).
class HttpServer {
 public:
  explicit HttpServer(Service& service);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  // Binds host:port (0 picks a free port) and returns the bound port.
  int bind(const std::string& host, int port);
  void serve();  // blocks until stop()
  void start();  // serve() on a background thread
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace altogether::annosvc
