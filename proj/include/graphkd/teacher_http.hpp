#pragma once

// Generic chat-completion teacher over HTTP(S). Kept out of the umbrella
// header so that only binaries which talk to a live endpoint pull in httplib.

#include <graphkd/error.hpp>
#include <graphkd/pipeline.hpp>
#include <graphkd/teacher_bridge.hpp>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <memory>
#include <string>

namespace graphkd {

struct HttpEndpoint {
    std::string base;  // scheme://host[:port]
    std::string path;  // starts with '/'

    static HttpEndpoint parse(const std::string& url) {
        const auto scheme_end = url.find("://");
        if (scheme_end == std::string::npos) fail(ErrorCode::InvalidConfig, "endpoint needs a scheme: " + url);
        const auto path_start = url.find('/', scheme_end + 3);
        if (path_start == std::string::npos) return {url, "/"};
        return {url.substr(0, path_start), url.substr(path_start)};
    }
};

class HttpTeacher final : public Teacher {
public:
    /// The bearer token is read from the environment variable `token_env`; an
    /// unset variable sends no Authorization header.
    HttpTeacher(std::string endpoint, std::string model_name, std::string token_env = "GRAPHKD_TEACHER_TOKEN",
                std::chrono::seconds timeout = std::chrono::seconds(120))
        : endpoint_(HttpEndpoint::parse(endpoint)), model_(std::move(model_name)), timeout_(timeout) {
        if (model_.empty()) fail(ErrorCode::InvalidConfig, "HTTP teacher needs a model name");
        if (const char* tok = token_env.empty() ? nullptr : std::getenv(token_env.c_str())) token_ = tok;
    }

    std::string name() const override { return "http:" + model_; }

    std::string complete(const TeacherRequest& req) override {
        httplib::Client cli(endpoint_.base);
        cli.set_connection_timeout(timeout_);
        cli.set_read_timeout(timeout_);
        httplib::Headers headers;
        if (!token_.empty()) headers.emplace("Authorization", "Bearer " + token_);
        const nlohmann::json body{{"model", model_},
                                  {"messages", nlohmann::json::array({{{"role", "user"}, {"content", req.prompt}}})},
                                  {"temperature", 0}};
        const auto res = cli.Post(endpoint_.path, headers, body.dump(), "application/json");
        if (!res) throw TransientTeacherError("request failed: " + httplib::to_string(res.error()));
        if (res->status == 429 || res->status >= 500) {
            throw TransientTeacherError("HTTP " + std::to_string(res->status));
        }
        if (res->status != 200) fail(ErrorCode::TeacherUnavailable, "HTTP " + std::to_string(res->status) + ": " + res->body);
        try {
            const auto j = nlohmann::json::parse(res->body);
            return j.at("choices").at(0).at("message").at("content").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorCode::TeacherResponseInvalid, std::string("unexpected response body: ") + e.what());
        }
    }

    std::optional<std::vector<double>> rationale_embedding(NodeId, ClassId) const override { return std::nullopt; }

private:
    HttpEndpoint endpoint_;
    std::string model_;
    std::string token_;
    std::chrono::seconds timeout_;
};

/// Factory covering every teacher kind.
inline std::unique_ptr<Teacher> make_teacher(const TeacherConfig& t, const TextGraph& g) {
    if (t.kind == TeacherKind::Http) {
        if (t.endpoint.empty()) fail(ErrorCode::InvalidConfig, "HTTP teacher needs an endpoint");
        return std::make_unique<HttpTeacher>(t.endpoint, t.model_name, t.token_env);
    }
    return make_mock_teacher(t, g);
}

} // namespace graphkd
