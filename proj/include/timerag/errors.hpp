#pragma once

#include <stdexcept>
#include <string>

namespace timerag {

/// Base for every error raised by the library. The CLI maps these to exit code 2.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define TIMERAG_DEFINE_ERROR(Name)            \
    class Name : public Error {               \
    public:                                   \
        using Error::Error;                   \
    }

TIMERAG_DEFINE_ERROR(ArgumentError);
TIMERAG_DEFINE_ERROR(ParseError);
TIMERAG_DEFINE_ERROR(ConflictError);
TIMERAG_DEFINE_ERROR(DataError);
TIMERAG_DEFINE_ERROR(FormatError);
TIMERAG_DEFINE_ERROR(NumericError);
TIMERAG_DEFINE_ERROR(ConfigError);
TIMERAG_DEFINE_ERROR(TemplateError);
TIMERAG_DEFINE_ERROR(ClientError);
TIMERAG_DEFINE_ERROR(TimeoutError);
TIMERAG_DEFINE_ERROR(ScriptedError);
TIMERAG_DEFINE_ERROR(ClassifierParseError);

#undef TIMERAG_DEFINE_ERROR

/// Diagnosis failure that carries the raw LLM transcript for inspection.
class AgentError : public Error {
public:
    AgentError(const std::string& what, std::string transcript)
        : Error(what), transcript_(std::move(transcript)) {}
    const std::string& transcript() const noexcept { return transcript_; }

private:
    std::string transcript_;
};

}  // namespace timerag
