#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <vector>

#include "altogether/corpus.hpp"
#include "altogether/error.hpp"
#include "altogether/io.hpp"

namespace altogether::annosvc {

// Guideline steps an annotator must confirm before a submission is stored.
inline constexpr std::array<std::string_view, 8> kChecklistKeys = {
    "copy-previous",  "starting-prompt", "alt-usage",       "hallucination-removal",
    "theme-removal",  "people-policy",   "missing-details", "structure-check",
};

struct Project {
  std::string id;
  std::string name;
  std::vector<std::string> item_ids;
  std::vector<std::string> vendors;
  int current_round = 1;
};

struct Assignment {
  std::string id;
  std::string project_id;
  int round_no = 0;
  std::string item_id;
  std::string vendor;
  bool submitted = false;
};

struct TaskView {
  Assignment assignment;
  std::string image_ref;
  std::string alt_text;
  std::string previous_caption;  // stored caption of round_no - 1
};

struct Submission {
  std::string caption;
  std::map<std::string, bool> checklist;
  std::string annotator;
};

// Validation failure with the individual violations, e.g.
// {"checklist:people-policy", "starting-prompt"}.
class SubmissionRejected : public Error {
 public:
  SubmissionRejected(const std::string& what, std::vector<std::string> violations)
      : Error(ErrorKind::kValidation, what), violations_(std::move(violations)) {}
  const std::vector<std::string>& violations() const { return violations_; }

 private:
  std::vector<std::string> violations_;
};

// Annotator ids are "<vendor>" or "<vendor>/<person>"; the vendor part routes
// tasks.
std::string vendor_of(std::string_view annotator);

// Vendor for an item in round r >= 2: rotation by item position, so with two
// vendors every item alternates between them round to round.
std::size_t vendor_index(std::size_t item_position, int round_no, std::size_t n_vendors);

struct ServiceOptions {
  std::optional<std::filesystem::path> log_path;  // append-only event log, replayed on construction
  std::chrono::seconds lease{15 * 60};             // how long next_task reserves a task for one annotator
};

// Multi-round annotation state. All mutations go through one writer lock and
// are appended to the event log before they become visible; reads take a
// shared lock.
class Service {
 public:
  explicit Service(ServiceOptions opts = {});
  ~Service();

  Project create_project(const std::string& name, std::vector<corpus::ImageItem> items,
                         const std::vector<std::string>& vendors);
  Project create_project(const std::string& name, const std::filesystem::path& items_file,
                         const std::vector<std::string>& vendors);

  std::vector<Assignment> open_round(const std::string& project_id, int round_no);

  // The annotator's leased task if it still has one, otherwise the first open
  // unleased assignment of its vendor. nullopt = empty queue.
  std::optional<TaskView> next_task(const std::string& project_id, const std::string& annotator);

  corpus::RoundRecord submit(const std::string& assignment_id, const Submission& submission);

  // Stats per completed round.
  std::vector<corpus::RoundStats> stats(const std::string& project_id) const;

  Project project(const std::string& project_id) const;
  std::vector<Project> projects() const;
  std::vector<Assignment> assignments(const std::string& project_id, int round_no) const;
  std::vector<corpus::RoundRecord> rounds(const std::string& project_id, const std::string& item_id) const;

  // Enables the alignment column of stats() for one project.
  void register_embeddings(const std::string& project_id, corpus::EmbeddingMatrix images,
                           corpus::TextEmbedder text_embedder);

 private:
  struct ProjectState;

  ProjectState& state(const std::string& project_id);
  const ProjectState& state(const std::string& project_id) const;
  Project apply_create(const io::Json& event);
  std::vector<Assignment> apply_open(const io::Json& event);
  corpus::RoundRecord apply_submit(const io::Json& event);
  void append(const io::Json& event);

  ServiceOptions opts_;
  mutable std::shared_mutex mu_;
  std::mutex lease_mu_;
  std::vector<std::unique_ptr<ProjectState>> projects_;
  std::map<std::string, std::size_t, std::less<>> by_id_;
  std::map<std::string, std::size_t, std::less<>> by_name_;
  std::map<std::string, std::array<std::size_t, 3>, std::less<>> assignment_index_;  // id -> (project, round, position)
  std::ofstream log_;
};

io::Json to_json(const Project& p);
io::Json to_json(const Assignment& a);
io::Json to_json(const TaskView& t);
io::Json to_json(const corpus::RoundRecord& r);
io::Json to_json(const corpus::RoundStats& s);

}  // namespace altogether::annosvc
