#include "altogether/error.hpp"

namespace altogether {

std::string_view error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kParse: return "parse_error";
    case ErrorKind::kIngestion: return "ingestion_error";
    case ErrorKind::kNotFound: return "not_found";
    case ErrorKind::kSequencing: return "sequencing_error";
    case ErrorKind::kValidation: return "validation_error";
    case ErrorKind::kFormat: return "format_error";
    case ErrorKind::kLength: return "length_error";
    case ErrorKind::kConfig: return "config_error";
    case ErrorKind::kDomain: return "domain_error";
    case ErrorKind::kShape: return "shape_error";
    case ErrorKind::kIo: return "io_error";
    case ErrorKind::kState: return "state_error";
    case ErrorKind::kConflict: return "conflict";
    case ErrorKind::kPrecondition: return "precondition_failed";
    case ErrorKind::kDependency: return "dependency_error";
    case ErrorKind::kRange: return "range_error";
    case ErrorKind::kAlignment: return "alignment_error";
    case ErrorKind::kDegenerate: return "degenerate_batch";
    case ErrorKind::kEmptyRound: return "empty_round";
    case ErrorKind::kTraining: return "training_error";
  }
  return "error";
}

}  // namespace altogether
